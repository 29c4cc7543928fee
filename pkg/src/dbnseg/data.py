"""Synthetic multi-domain shape scenes, on-disk format, augmentation and batching.

Scenes hold non-overlapping circles, squares and triangles on a background;
each class has its own colour family. A domain is a fixed photometric
transform of the base render; masks never change across domains.

On disk::

    root/manifest.txt
    root/<split>/<domain_name>/img_<n>.ppm    binary P6, maxval 255
    root/<split>/<domain_name>/mask_<n>.pgm   binary P5, value = class id
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Optional, Sequence, Union

import numpy as np

CLASS_NAMES = ("background", "circle", "square", "triangle")
NUM_CLASSES = len(CLASS_NAMES)
DOMAIN_NAMES = (
    "identity",
    "bright_up",
    "bright_down",
    "noise",
    "tint_blue",
    "tint_orange",
    "low_contrast",
)
MAX_DOMAINS = len(DOMAIN_NAMES)
SPLITS = ("train", "val")

# base colour per class; each scene jitters these by up to +-0.06
_CLASS_COLORS = np.array([
    [0.45, 0.45, 0.45],
    [0.85, 0.20, 0.20],
    [0.20, 0.75, 0.25],
    [0.20, 0.30, 0.85],
], dtype=np.float32)


class FormatError(ValueError):
    """Malformed PPM/PGM file or manifest."""


@dataclass
class SegSample:
    image: np.ndarray   # float32 [3, H, W] in [0, 1]
    mask: np.ndarray    # uint8 [H, W] class ids
    domain: int
    index: int = 0

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"image must be [3, H, W], got {self.image.shape}")
        if self.mask.shape != self.image.shape[1:]:
            raise ValueError(f"mask {self.mask.shape} does not match image {self.image.shape}")


# --------------------------------------------------------------------------
# rendering

def sample_rng(seed: int, domain: int, split: str, index: int) -> np.random.Generator:
    """Independent stream per sample so generation order never matters."""
    return np.random.default_rng([seed, SPLITS.index(split), domain, index])


def _shape_mask(kind: int, cy: float, cx: float, r: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) + 0.5
    if kind == 1:
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == 2:
        return (np.abs(yy - cy) <= r * 0.85) & (np.abs(xx - cx) <= r * 0.85)
    # upward isosceles triangle inscribed in the bounding circle
    top, bottom = cy - r, cy + r * 0.7
    t = (yy - top) / (bottom - top)
    half = t * r * 0.95
    return (t >= 0) & (t <= 1) & (np.abs(xx - cx) <= half)


def render_scene(rng: np.random.Generator, size: int = 64, max_shapes: int = 4):
    """Base image ``[3, H, W]`` float32 and mask ``[H, W]`` uint8."""
    image = np.empty((3, size, size), np.float32)
    mask = np.zeros((size, size), np.uint8)
    bg = _CLASS_COLORS[0] + rng.uniform(-0.06, 0.06, 3).astype(np.float32)
    # gentle vertical gradient so the background is not flat
    ramp = np.linspace(-0.05, 0.05, size, dtype=np.float32)[:, None]
    image[:] = bg[:, None, None] + ramp[None]
    placed: list[tuple[float, float, float]] = []
    lo, hi = size * 0.09, size * 0.2
    target = int(rng.integers(1, max_shapes + 1))
    for _ in range(40):
        if len(placed) == target:
            break
        r = float(rng.uniform(lo, hi))
        cy, cx = (float(v) for v in rng.uniform(r, size - r, 2))
        if any((cy - py) ** 2 + (cx - px) ** 2 < (r + pr + 1.5) ** 2 for py, px, pr in placed):
            continue
        kind = int(rng.integers(1, NUM_CLASSES))
        region = _shape_mask(kind, cy, cx, r, size)
        color = _CLASS_COLORS[kind] + rng.uniform(-0.06, 0.06, 3).astype(np.float32)
        image[:, region] = color[:, None]
        mask[region] = kind
        placed.append((cy, cx, r))
    np.clip(image, 0.0, 1.0, out=image)
    return quantize(image), mask


def quantize(image: np.ndarray) -> np.ndarray:
    """Snap to the 1/255 grid the PPM files store."""
    return (np.round(np.clip(image, 0, 1) * 255) / 255).astype(np.float32)


def apply_domain(base: np.ndarray, domain: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Photometric transform ``domain`` of a base image; result clamped to [0, 1].

    0 identity, 1 brightness +0.25, 2 brightness -0.25, 3 gaussian noise
    sigma 0.05, 4 blue tint, 5 orange tint, 6 contrast x0.6 about 0.5.
    """
    if not 0 <= domain < MAX_DOMAINS:
        raise ValueError(f"domain must be in [0, {MAX_DOMAINS}), got {domain}")
    x = base.astype(np.float32)
    if domain == 0:
        return x.copy()
    if domain == 1:
        out = x + np.float32(0.25)
    elif domain == 2:
        out = x - np.float32(0.25)
    elif domain == 3:
        if rng is None:
            raise ValueError("the noise domain needs an rng")
        out = x + rng.normal(0.0, 0.05, x.shape).astype(np.float32)
    elif domain == 4:
        out = x * np.float32([0.75, 0.85, 1.0])[:, None, None] + np.float32([0.0, 0.0, 0.15])[:, None, None]
    elif domain == 5:
        out = x * np.float32([1.0, 0.85, 0.7])[:, None, None] + np.float32([0.15, 0.05, 0.0])[:, None, None]
    else:
        out = (x - np.float32(0.5)) * np.float32(0.6) + np.float32(0.5)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def make_sample(seed: int, domain: int, split: str, index: int, size: int = 64) -> tuple[SegSample, np.ndarray]:
    """Render one sample; returns ``(sample, base_image)``."""
    rng = sample_rng(seed, domain, split, index)
    base, mask = render_scene(rng, size)
    image = apply_domain(base, domain, rng)
    return SegSample(image, mask, domain, index), base


# --------------------------------------------------------------------------
# PPM / PGM

def _read_header(buf: bytes, magic: bytes, path) -> tuple[int, int, int, int]:
    if buf[:2] != magic:
        raise FormatError(f"{path}: expected magic {magic!r}, found {buf[:2]!r}")
    tokens: list[int] = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: malformed header near byte {start}")
        tokens.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError(f"{path}: header must end with one whitespace byte")
    w, h, maxval = tokens
    if w < 1 or h < 1:
        raise FormatError(f"{path}: invalid dimensions {w}x{h}")
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    return w, h, maxval, pos + 1


def write_ppm(path, image: np.ndarray) -> None:
    """``image`` is float ``[3, H, W]`` in [0, 1]."""
    data = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    w, h, _, off = _read_header(buf, b"P6", path)
    need = w * h * 3
    if len(buf) - off < need:
        raise FormatError(f"{path}: expected {need} pixel bytes after header, found {len(buf) - off}")
    arr = np.frombuffer(buf, np.uint8, need, off).reshape(h, w, 3)
    return (arr.transpose(2, 0, 1).astype(np.float32) / np.float32(255)).astype(np.float32)


def write_pgm(path, mask: np.ndarray) -> None:
    data = np.asarray(mask)
    if data.min(initial=0) < 0 or data.max(initial=0) > 255:
        raise ValueError("mask ids must fit in one byte")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(data.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    w, h, _, off = _read_header(buf, b"P5", path)
    if len(buf) - off < w * h:
        raise FormatError(f"{path}: expected {w * h} pixel bytes after header, found {len(buf) - off}")
    return np.frombuffer(buf, np.uint8, w * h, off).reshape(h, w).copy()


def sample_paths(root, split: str, domain_name: str, index: int) -> tuple[Path, Path]:
    d = Path(root) / split / domain_name
    return d / f"img_{index}.ppm", d / f"mask_{index}.pgm"


def save_sample(root, split: str, domain_name: str, sample: SegSample) -> None:
    img_path, mask_path = sample_paths(root, split, domain_name, sample.index)
    img_path.parent.mkdir(parents=True, exist_ok=True)
    write_ppm(img_path, sample.image)
    write_pgm(mask_path, sample.mask)


def load_sample(root, split: str, domain: int, index: int, domain_names: Sequence[str] = DOMAIN_NAMES) -> SegSample:
    img_path, mask_path = sample_paths(root, split, domain_names[domain], index)
    image, mask = read_ppm(img_path), read_pgm(mask_path)
    if mask.shape != image.shape[1:]:
        raise FormatError(f"{mask_path}: mask {mask.shape} does not match image {image.shape[1:]}")
    return SegSample(image, mask, domain, index)


# --------------------------------------------------------------------------
# manifest

@dataclass
class DatasetManifest:
    num_classes: int
    class_names: list[str]
    domain_names: list[str]
    counts: dict[str, list[int]]   # split -> per-domain sample count
    seed: int = 0
    size: int = 64

    @property
    def num_domains(self) -> int:
        return len(self.domain_names)

    def validate(self) -> None:
        if self.num_classes < 1 or len(self.class_names) != self.num_classes:
            raise FormatError("manifest: class_names must list num_classes names")
        for split, counts in self.counts.items():
            if len(counts) != self.num_domains:
                raise FormatError(f"manifest: split {split!r} has {len(counts)} counts for {self.num_domains} domains")
            if any(c < 1 for c in counts):
                raise FormatError(f"manifest: split {split!r} has an empty domain")

    def sample_ids(self, split: str, domains: Optional[Sequence[int]] = None) -> dict[int, list[tuple[int, int]]]:
        """``{domain: [(domain, index), ...]}`` for the chosen split/domains."""
        domains = range(self.num_domains) if domains is None else domains
        return {d: [(d, i) for i in range(self.counts[split][d])] for d in domains}

    def dumps(self) -> str:
        lines = [
            f"num_classes = {self.num_classes}",
            f"seed = {self.seed}",
            f"size = {self.size}",
            f"num_domains = {self.num_domains}",
        ]
        lines += [f"class.{i} = {n}" for i, n in enumerate(self.class_names)]
        lines += [f"domain.{i} = {n}" for i, n in enumerate(self.domain_names)]
        for split in sorted(self.counts):
            lines += [f"count.{split}.{i} = {c}" for i, c in enumerate(self.counts[split])]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "DatasetManifest":
        kv = parse_key_values(text)
        try:
            num_classes = int(kv["num_classes"])
            nd = int(kv["num_domains"])
            classes = [kv[f"class.{i}"] for i in range(num_classes)]
            domains = [kv[f"domain.{i}"] for i in range(nd)]
        except KeyError as e:
            raise FormatError(f"manifest: missing key {e.args[0]!r}") from None
        counts: dict[str, list[int]] = {}
        for key, value in kv.items():
            if key.startswith("count."):
                _, split, idx = key.split(".")
                counts.setdefault(split, [0] * nd)[int(idx)] = int(value)
        m = cls(num_classes, classes, domains, counts, int(kv.get("seed", 0)), int(kv.get("size", 64)))
        m.validate()
        return m

    def save(self, root) -> None:
        Path(root, "manifest.txt").write_text(self.dumps())

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        path = Path(root, "manifest.txt")
        if not path.is_file():
            raise FileNotFoundError(f"no manifest.txt in {root}")
        return cls.loads(path.read_text())


def parse_key_values(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def generate_domain_dataset(out_dir, seed: int = 0, per_domain: int = 48, domains: int = 4, size: int = 64,
                            val_per_domain: Optional[int] = None) -> DatasetManifest:
    """Write a reproducible multi-domain dataset to ``out_dir``.

    Each domain gets ``per_domain`` training and ``val_per_domain``
    (default ``max(1, per_domain // 4)``) validation scenes.
    """
    if not 1 <= domains <= MAX_DOMAINS:
        raise ValueError(f"domains must be in [1, {MAX_DOMAINS}], got {domains}")
    if size < 2 or size % 2:
        raise ValueError(f"size must be even and >= 2, got {size}")
    if per_domain < 1:
        raise ValueError("per_domain must be >= 1")
    val_per_domain = max(1, per_domain // 4) if val_per_domain is None else val_per_domain
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {root}: {e}") from e
    if not os.access(root, os.W_OK):
        raise PermissionError(f"output directory {root} is not writable")
    names = list(DOMAIN_NAMES[:domains])
    counts = {"train": [per_domain] * domains, "val": [val_per_domain] * domains}
    for split, per in counts.items():
        for d in range(domains):
            for i in range(per[d]):
                sample, _ = make_sample(seed, d, split, i, size)
                save_sample(root, split, names[d], sample)
    manifest = DatasetManifest(NUM_CLASSES, list(CLASS_NAMES), names, counts, seed, size)
    manifest.save(root)
    return manifest


# --------------------------------------------------------------------------
# in-memory datasets

@dataclass
class SegDataset:
    images: np.ndarray    # float32 [N, 3, H, W]
    masks: np.ndarray     # int64 [N, H, W]
    domains: np.ndarray   # int64 [N]
    ids: list = field(default_factory=list)

    def __post_init__(self):
        if not self.ids:
            self.ids = list(range(len(self.images)))

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, keep) -> "SegDataset":
        keep = np.asarray(keep)
        if keep.dtype == bool:
            keep = np.flatnonzero(keep)
        return SegDataset(self.images[keep], self.masks[keep], self.domains[keep], [self.ids[k] for k in keep])

    def groups(self) -> dict[int, list[int]]:
        """``{domain: [row, ...]}`` in row order."""
        out: dict[int, list[int]] = {}
        for row, d in enumerate(self.domains.tolist()):
            out.setdefault(int(d), []).append(row)
        return dict(sorted(out.items()))


def load_split(root, split: str, manifest: Optional[DatasetManifest] = None,
               domains: Optional[Sequence[int]] = None) -> SegDataset:
    manifest = manifest or DatasetManifest.load(root)
    images, masks, doms, ids = [], [], [], []
    for d, entries in manifest.sample_ids(split, domains).items():
        for _, i in entries:
            s = load_sample(root, split, d, i, manifest.domain_names)
            images.append(s.image)
            masks.append(s.mask)
            doms.append(d)
            ids.append((d, i))
    if not images:
        raise ValueError(f"split {split!r} selects no samples")
    return SegDataset(np.stack(images), np.stack(masks).astype(np.int64), np.asarray(doms, np.int64), ids)


# --------------------------------------------------------------------------
# augmentation

def random_crop(sample: SegSample, out: int, rng: np.random.Generator) -> SegSample:
    _, h, w = sample.image.shape
    if out > h or out > w or out < 1:
        raise ValueError(f"crop size {out} does not fit a {h}x{w} sample")
    top = int(rng.integers(0, h - out + 1))
    left = int(rng.integers(0, w - out + 1))
    return SegSample(sample.image[:, top:top + out, left:left + out].copy(),
                     sample.mask[top:top + out, left:left + out].copy(), sample.domain, sample.index)


def hflip(sample: SegSample) -> SegSample:
    return SegSample(sample.image[:, :, ::-1].copy(), sample.mask[:, ::-1].copy(), sample.domain, sample.index)


def random_hflip(sample: SegSample, rng: np.random.Generator) -> SegSample:
    return hflip(sample) if rng.random() < 0.5 else sample


# --------------------------------------------------------------------------
# batching

def domain_batch_scheduler(source: Union[DatasetManifest, SegDataset, Mapping[int, Sequence]], batch_size: int,
                           rng: np.random.Generator, split: str = "train",
                           domains: Optional[Sequence[int]] = None) -> Iterator[tuple[int, list]]:
    """One epoch of single-domain batches.

    Each domain's items are shuffled with ``rng`` and chunked (the last short
    chunk is kept); chunks are emitted round-robin over domains in ascending
    order, skipping domains that have run out.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if isinstance(source, DatasetManifest):
        groups = source.sample_ids(split, domains)
    elif isinstance(source, SegDataset):
        groups = source.groups()
    else:
        groups = {int(d): list(v) for d, v in source.items()}
    if domains is not None:
        groups = {d: groups.get(d, []) for d in domains}
    for d, items in groups.items():
        if len(items) == 0:
            raise ValueError(f"domain {d} has no samples")
    queues = {}
    for d in sorted(groups):
        items = list(groups[d])
        order = rng.permutation(len(items))
        shuffled = [items[k] for k in order]
        queues[d] = [shuffled[k:k + batch_size] for k in range(0, len(shuffled), batch_size)]
    for step in range(max(len(q) for q in queues.values())):
        for d in sorted(queues):
            if step < len(queues[d]):
                yield d, queues[d][step]
