"""Binary checkpoint format.

Layout (all integers little-endian u32)::

    b"DSG1" | version | tensor count
    per tensor: name length | UTF-8 name | rank | dims... | float32 LE data

Parameters use their model names, normalisation statistics are stored as
``dbn.<layer>.mean`` / ``.var`` / ``.updates`` with a leading domain axis,
and the training/architecture configuration is echoed as one-element
``config.<key>`` / ``arch.<key>`` tensors.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"DSG1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint at offset {pos}: needed {n} bytes for {what}, "
                                  f"{len(buf) - pos} left")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    magic = take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at offset 4")
    out: dict[str, np.ndarray] = {}
    for k in range(count):
        start = pos
        (nlen,) = struct.unpack("<I", take(4, f"name length of tensor {k}"))
        try:
            name = take(nlen, f"name of tensor {k}").decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"tensor name at offset {start + 4} is not UTF-8") from e
        (rank,) = struct.unpack("<I", take(4, f"rank of {name!r}"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name!r}"))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = take(4 * size, f"data of {name!r}")
        out[name] = np.frombuffer(data, "<f4").astype(np.float32).reshape(dims)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes at offset {pos}")
    return out


def save_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(tensors))


def load_tensors(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())
