"""Dense tensors and the reverse-mode tape.

A :class:`Tensor` is a thin wrapper over a contiguous numpy array. Primitive
operations (see :mod:`dbnseg.ops`) produce new tensors and, when a
:class:`Tape` is active and some input requires a gradient, append a record
holding the inputs, the output and a vector-Jacobian product closure.
:meth:`Tape.gradient` replays those closures in reverse recorded order.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_active_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "dbnseg_active_tape", default=None
)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class Tensor:
    """N-dimensional float array with an optional gradient slot.

    Model state is float32; float64 is kept as-is so the gradient checker
    can evaluate every primitive in double precision.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in _FLOAT_DTYPES else np.float32
        self.data = np.asarray(arr, dtype=dtype, order="C")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    inputs: tuple
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered log of primitive applications for one backward pass.

    Use as a context manager; primitives record onto the innermost active tape::

        with Tape() as tape:
            loss = ops.cross_entropy(model(x), y)
        grads = tape.gradient(loss, params)

    A tape is single-owner: build and consume it on one thread.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def record(self, inputs: tuple, output: Tensor, vjp) -> None:
        self.records.append(_Record(inputs, output, vjp))

    def gradient(self, target: Tensor, sources: Sequence[Tensor], cotangent=None) -> list[np.ndarray]:
        """Vector-Jacobian product of ``target`` w.r.t. each of ``sources``.

        ``cotangent`` defaults to ones (the plain gradient of a scalar).
        Sources the target does not depend on get zero arrays.
        """
        if cotangent is None:
            cotangent = np.ones_like(target.data)
        cotangent = np.asarray(cotangent, dtype=target.data.dtype)
        if cotangent.shape != target.shape:
            raise ShapeError(f"cotangent shape {cotangent.shape} != target shape {target.shape}")
        grads: dict[int, np.ndarray] = {id(target): cotangent}
        wanted = {id(s) for s in sources}
        for rec in reversed(self.records):
            g = grads.get(id(rec.output))
            if g is None:
                continue
            if id(rec.output) not in wanted:
                del grads[id(rec.output)]
            for inp, gi in zip(rec.inputs, rec.vjp(g)):
                if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return [
            grads[id(s)] if id(s) in grads else np.zeros_like(s.data)
            for s in sources
        ]


def current_tape() -> Optional[Tape]:
    return _active_tape.get()


def make_output(data: np.ndarray, inputs: tuple, vjp) -> Tensor:
    """Wrap a primitive's result and record it on the active tape if needed."""
    out = Tensor(data, dtype=data.dtype if data.dtype in _FLOAT_DTYPES else None)
    tape = _active_tape.get()
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(inputs, out, vjp)
    return out
