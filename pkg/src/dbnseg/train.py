"""Training loop, optimiser, learning-rate schedule, evaluation and checkpoints."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import ops
from .checkpoint import CheckpointError, load_tensors, save_tensors
from .data import SegDataset, SegSample, domain_batch_scheduler, parse_key_values, random_crop, random_hflip
from .metrics import ConfusionMatrix, miou
from .model import ModelConfig, SegmentationModel
from .tensor import Tape, Tensor

logger = logging.getLogger(__name__)

METRICS_HEADER = "epoch,iter,lr,loss,val_miou,val_miou_shifted_domain"


class NonFiniteLossError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.01
    poly_exponent: float = 2.0
    momentum: float = 0.9
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    norm: str = "dbn"
    scales_train: tuple = (0.5, 1.0)
    aux_weight: float = 0.4
    crop_size: int = 48
    flip: bool = True
    holdout_domain: int = -1  # -1 last domain, -2 none
    base_channels: int = 16
    low_channels: int = 32
    num_fusion_blocks: int = 3
    key_channels: int = 32
    epsilon: float = 1e-5
    stats_momentum: float = 0.1

    def __post_init__(self):
        if self.base_lr < 0 or self.poly_exponent <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("base_lr must be >= 0, poly_exponent > 0 and momentum in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.norm.lower() not in ("bn", "dbn"):
            raise ValueError(f"norm must be 'bn' or 'dbn', got {self.norm!r}")
        if self.crop_size < 2 or self.crop_size % 2:
            raise ValueError("crop_size must be even and >= 2")

    def model_config(self, num_classes: int, num_domains: int) -> ModelConfig:
        return ModelConfig(num_classes, num_domains, self.norm.upper(), self.base_channels, self.low_channels,
                           self.num_fusion_blocks, self.key_channels, self.epsilon, self.stats_momentum)

    def holdout(self, num_domains: int) -> Optional[int]:
        """Held-out domain index, or None when there is nothing left to train on."""
        if num_domains < 2 or self.holdout_domain is None:
            return None
        if self.holdout_domain < 0:
            return num_domains + self.holdout_domain if self.holdout_domain == -1 else None
        return self.holdout_domain

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        """Build from string or typed values, coercing each to its field type."""
        kwargs = {}
        known = {f.name: f for f in fields(cls)}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in known:
                raise KeyError(f"unknown config key {key!r}")
            default = known[key].default
            kwargs[key] = _coerce(raw, default)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_mapping(parse_key_values(Path(path).read_text()))

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(float(s)) for s in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _coerce(raw, default):
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(default, tuple) else type(default)(raw)
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low not in ("1", "0", "true", "false", "yes", "no"):
            raise ValueError(f"not a boolean: {raw!r}")
        return low in ("1", "true", "yes")
    if isinstance(default, tuple):
        return tuple(float(s) for s in raw.split(",") if s.strip())
    return type(default)(raw.strip())


# --------------------------------------------------------------------------
# schedule and optimiser

def poly_lr(base_lr: float, iteration: int, max_iter: int, exponent: float = 2.0) -> float:
    """``base_lr * (1 - iteration / max_iter) ** exponent``."""
    if max_iter < 1 or not 0 <= iteration <= max_iter:
        raise ValueError(f"iteration must lie in [0, max_iter]; got {iteration} of {max_iter}")
    return base_lr * (1.0 - iteration / max_iter) ** exponent


def sgd_momentum_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], velocity: list[np.ndarray],
                      lr: float, momentum: float) -> None:
    """``v = momentum * v + g; p = p - lr * v``, in place on ``params`` and ``velocity``."""
    if not len(params) == len(grads) == len(velocity):
        raise ValueError("params, grads and velocity must have equal length")
    for k, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape or velocity[k].shape != p.shape:
            raise ValueError(f"shape mismatch for {p.name}: param {p.shape}, grad {g.shape}, velocity {velocity[k].shape}")
        dtype = p.data.dtype.type
        v = dtype(momentum) * velocity[k] + g.astype(p.data.dtype)
        velocity[k] = v
        p.data = p.data - dtype(lr) * v


# --------------------------------------------------------------------------
# checkpoints

def checkpoint_tensors(model: SegmentationModel, config: Optional[TrainConfig] = None) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for key, value in model.config.as_dict().items():
        out[f"arch.{key}"] = np.array([1.0 if value == "DBN" else 0.0 if value == "BN" else value], np.float32)
    if config is not None:
        for f in fields(config):
            v = getattr(config, f.name)
            if isinstance(v, str):
                v = [1.0 if v.lower() == "dbn" else 0.0]
            out[f"config.{f.name}"] = np.array(v if isinstance(v, (tuple, list)) else [v], np.float32)
    for name, p in model.parameter_dict().items():
        out[name] = p.data
    out.update(model.domain_stats())
    return out


def save_checkpoint(path, model: SegmentationModel, config: Optional[TrainConfig] = None) -> None:
    save_tensors(path, checkpoint_tensors(model, config))


def _from_f32(value) -> float:
    # shortest decimal that round-trips in float32, so 0.01 comes back as 0.01
    return float(str(np.float32(value)))


def load_checkpoint(path) -> tuple[SegmentationModel, Optional[TrainConfig]]:
    tensors = load_tensors(path)
    arch = {}
    for f in fields(ModelConfig):
        key = f"arch.{f.name}"
        if key not in tensors:
            raise CheckpointError(f"checkpoint lacks {key!r}")
        v = float(tensors[key][0])
        if f.name == "norm_kind":
            arch[f.name] = "DBN" if v == 1.0 else "BN"
        else:
            arch[f.name] = type(f.default)(v) if isinstance(f.default, int) else _from_f32(tensors[key][0])
    model = SegmentationModel(ModelConfig(**arch))
    for name, p in model.parameter_dict().items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint lacks parameter {name!r}")
        if tensors[name].shape != p.shape:
            raise CheckpointError(f"parameter {name!r} has shape {tensors[name].shape}, model expects {p.shape}")
        p.data = tensors[name].copy()
    for layer in model.norm_layers():
        layer.load_state(tensors)
    config = None
    if any(k.startswith("config.") for k in tensors):
        values = {}
        for f in fields(TrainConfig):
            arr = tensors.get(f"config.{f.name}")
            if arr is None:
                continue
            if f.name == "norm":
                values[f.name] = "dbn" if arr[0] == 1.0 else "bn"
            elif isinstance(f.default, tuple):
                values[f.name] = tuple(_from_f32(s) for s in arr)
            elif isinstance(f.default, bool):
                values[f.name] = bool(arr[0])
            elif isinstance(f.default, float):
                values[f.name] = _from_f32(arr[0])
            else:
                values[f.name] = type(f.default)(arr[0].item())
        config = TrainConfig(**values)
    return model, config


# --------------------------------------------------------------------------
# evaluation

@dataclass
class EvalReport:
    num_classes: int
    scales: tuple
    stats: str
    per_domain: dict[int, ConfusionMatrix] = field(default_factory=dict)
    domain_names: dict[int, str] = field(default_factory=dict)

    @property
    def overall(self) -> ConfusionMatrix:
        total = ConfusionMatrix(self.num_classes)
        for conf in self.per_domain.values():
            total = total + conf
        return total

    def domain_miou(self, domain: int) -> Optional[float]:
        return miou(self.per_domain[domain]).mean

    @property
    def mean_iou(self) -> Optional[float]:
        return miou(self.overall).mean

    def rows(self) -> list[list]:
        """One row per domain plus an ``overall`` row."""
        out = []
        entries = [(self.domain_names.get(d, str(d)), c) for d, c in sorted(self.per_domain.items())]
        entries.append(("overall", self.overall))
        scales = "/".join(f"{s:g}" for s in self.scales)
        for name, conf in entries:
            res = miou(conf)
            out.append([scales, self.stats, name, _fmt(res.mean)] + [_fmt(v) for v in res.per_class])
        return out

    def format(self) -> str:
        lines = [f"scales={'/'.join(f'{s:g}' for s in self.scales)} stats={self.stats}"]
        for row in self.rows():
            ious = " ".join(row[4:])
            lines.append(f"  {row[2]:<14} mIoU {row[3]:>8}   per-class {ious}")
        return "\n".join(lines)


def _fmt(v: Optional[float]) -> str:
    return "nan" if v is None else f"{v:.6f}"


def evaluate(model: SegmentationModel, dataset: SegDataset, scales: Sequence[float] = (0.5, 1.0),
             stats: str = "running", batch_size: int = 8, domain_names: Optional[Sequence[str]] = None) -> EvalReport:
    """Accumulate per-domain confusion matrices of argmax fused predictions."""
    if stats not in ("running", "batch"):
        raise ValueError(f"stats must be 'running' or 'batch', got {stats!r}")
    nc = model.config.num_classes
    report = EvalReport(nc, tuple(float(s) for s in scales), stats)
    for d, rows in dataset.groups().items():
        conf = ConfusionMatrix(nc)
        for k in range(0, len(rows), batch_size):
            chunk = rows[k:k + batch_size]
            pred = model.predict(dataset.images[chunk], d, scales, stats)
            conf.update(dataset.masks[chunk], pred)
        report.per_domain[d] = conf
        if domain_names is not None:
            report.domain_names[d] = domain_names[d]
    return report


# --------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    model: SegmentationModel
    config: TrainConfig
    history: list[dict] = field(default_factory=list)
    iteration_losses: list[list[float]] = field(default_factory=list)
    best_miou: Optional[float] = None
    best_epoch: Optional[int] = None

    def metrics_csv(self) -> str:
        lines = [METRICS_HEADER]
        for row in self.history:
            lines.append(",".join([
                str(row["epoch"]), str(row["iter"]), f"{row['lr']:.8g}", f"{row['loss']:.8g}",
                _fmt(row["val_miou"]), _fmt(row["val_miou_shifted_domain"]),
            ]))
        return "\n".join(lines) + "\n"


def _augment(dataset: SegDataset, rows: Iterable[int], config: TrainConfig, rng: np.random.Generator):
    images, masks = [], []
    for r in rows:
        s = SegSample(dataset.images[r], dataset.masks[r], int(dataset.domains[r]))
        if config.crop_size < s.image.shape[1] or config.crop_size < s.image.shape[2]:
            s = random_crop(s, config.crop_size, rng)
        if config.flip:
            s = random_hflip(s, rng)
        images.append(s.image)
        masks.append(s.mask)
    return np.stack(images).astype(np.float32), np.stack(masks).astype(np.int64)


def training_loss(model: SegmentationModel, images: Tensor, masks: np.ndarray, domain: int,
                  config: TrainConfig) -> Tensor:
    """Cross-entropy of the fused logits plus weighted auxiliary region loss."""
    fused, parts = model.forward(images, domain, "train", config.scales_train, return_parts=True)
    aux = next(p[3] for p in parts if p[0] == 1.0)
    loss = ops.cross_entropy(fused, masks)
    if config.aux_weight:
        loss = ops.add(loss, ops.scalar_affine(ops.cross_entropy(aux, masks), config.aux_weight))
    return loss


def iterations_per_epoch(groups: dict, batch_size: int) -> int:
    return sum(math.ceil(len(v) / batch_size) for v in groups.values())


def train(config: TrainConfig, train_set: SegDataset, num_classes: int, num_domains: int,
          val_sets: Optional[dict[str, SegDataset]] = None, out_dir=None) -> TrainResult:
    """Train a model on single-domain batches; evaluate ``val_sets`` after each epoch.

    ``val_sets`` may hold ``"val"`` (in-domain) and ``"shifted"`` datasets.
    With ``out_dir`` set, ``metrics.csv``, ``best.ckpt`` (on validation
    improvement) and ``last.ckpt`` are written there.
    """
    val_sets = val_sets or {}
    model = SegmentationModel(config.model_config(num_classes, num_domains), seed=config.seed)
    params = model.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    rng = np.random.default_rng([config.seed, 1])
    groups = train_set.groups()
    max_iter = config.epochs * iterations_per_epoch(groups, config.batch_size)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    result = TrainResult(model, config)
    it = 0
    lr = poly_lr(config.base_lr, 0, max_iter, config.poly_exponent)
    for epoch in range(1, config.epochs + 1):
        losses = []
        for domain, rows in domain_batch_scheduler(train_set, config.batch_size, rng):
            x, y = _augment(train_set, rows, config, rng)
            lr = poly_lr(config.base_lr, it, max_iter, config.poly_exponent)
            with Tape() as tape:
                loss = training_loss(model, Tensor(x), y, domain, config)
            value = loss.item()
            if not math.isfinite(value):
                ids = [train_set.ids[r] for r in rows]
                raise NonFiniteLossError(f"non-finite loss {value} at iteration {it} (epoch {epoch}); batch ids {ids}")
            grads = tape.gradient(loss, params)
            sgd_momentum_step(params, grads, velocity, lr, config.momentum)
            losses.append(value)
            it += 1
        result.iteration_losses.append(losses)
        row = {"epoch": epoch, "iter": it, "lr": lr, "loss": float(np.mean(losses)),
               "val_miou": None, "val_miou_shifted_domain": None}
        if "val" in val_sets:
            row["val_miou"] = evaluate(model, val_sets["val"], config.scales_train, "running",
                                       config.batch_size).mean_iou
        if "shifted" in val_sets:
            row["val_miou_shifted_domain"] = evaluate(model, val_sets["shifted"], config.scales_train, "running",
                                                      config.batch_size).mean_iou
        result.history.append(row)
        logger.info("epoch %d loss %.4f val %s shifted %s", epoch, row["loss"],
                    _fmt(row["val_miou"]), _fmt(row["val_miou_shifted_domain"]))
        score = row["val_miou"]
        if score is not None and (result.best_miou is None or score > result.best_miou):
            result.best_miou, result.best_epoch = score, epoch
            if out is not None:
                save_checkpoint(out / "best.ckpt", model, config)
        if out is not None:
            (out / "metrics.csv").write_text(result.metrics_csv())
    if out is not None:
        save_checkpoint(out / "last.ckpt", model, config)
    return result


def split_by_holdout(dataset: SegDataset, holdout: Optional[int]) -> tuple[SegDataset, Optional[SegDataset]]:
    if holdout is None:
        return dataset, None
    is_held = dataset.domains == holdout
    return dataset.subset(~is_held), (dataset.subset(is_held) if is_held.any() else None)


def train_from_directory(config: TrainConfig, data_root, out_dir=None) -> TrainResult:
    """Train on ``data_root``'s train split, excluding the held-out domain."""
    from .data import DatasetManifest, load_split

    manifest = DatasetManifest.load(data_root)
    holdout = config.holdout(manifest.num_domains)
    train_all = load_split(data_root, "train", manifest)
    train_set, _ = split_by_holdout(train_all, holdout)
    val_sets = {}
    if "val" in manifest.counts:
        val_in, val_shift = split_by_holdout(load_split(data_root, "val", manifest), holdout)
        val_sets["val"] = val_in
        if val_shift is not None:
            val_sets["shifted"] = val_shift
    return train(config, train_set, manifest.num_classes, manifest.num_domains, val_sets, out_dir)


def compare_norms(config: TrainConfig, data_root, out_dir=None) -> dict[str, TrainResult]:
    """Train BN and DBN variants with identical seeds; keyed by norm name."""
    results = {}
    for norm in ("bn", "dbn"):
        sub = None if out_dir is None else Path(out_dir) / norm
        results[norm] = train_from_directory(replace(config, norm=norm), data_root, sub)
    return results
