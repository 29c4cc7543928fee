"""scikit-learn style wrapper around training and inference."""

from __future__ import annotations

from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import SegDataset
from .train import TrainConfig, evaluate, train


def check_images(X) -> np.ndarray:
    """Validate a ``[N, 3, H, W]`` batch of finite images with even H and W."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 4 or X.shape[1] != 3:
        raise ValueError(f"expected images of shape [N, 3, H, W], got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("empty image batch")
    if X.shape[2] % 2 or X.shape[3] % 2:
        raise ValueError(f"image height and width must be even, got {X.shape[2:]}")
    if not np.isfinite(X).all():
        raise ValueError("images contain NaN or infinite values")
    return X


def check_masks(y, X: np.ndarray, num_classes: int | None = None) -> np.ndarray:
    """Validate integer masks matching ``X`` in count and spatial size."""
    y = np.asarray(y)
    if y.shape != (X.shape[0],) + X.shape[2:]:
        raise ValueError(f"masks must have shape {(X.shape[0],) + X.shape[2:]}, got {y.shape}")
    if y.dtype.kind not in "iu":
        if not np.array_equal(y, np.round(y)):
            raise ValueError("masks must hold integer class ids")
    y = y.astype(np.int64)
    if y.min() < 0 or (num_classes is not None and y.max() >= num_classes):
        raise ValueError(f"class ids must lie in [0, {num_classes})")
    return y


def check_domains(domains, n: int, num_domains: int | None = None) -> np.ndarray:
    """Per-sample domain ids; ``None`` puts everything in domain 0."""
    if domains is None:
        return np.zeros(n, np.int64)
    d = np.asarray(domains)
    if d.ndim == 0:
        d = np.full(n, int(d))
    if d.shape != (n,):
        raise ValueError(f"domains must have shape ({n},), got {d.shape}")
    d = d.astype(np.int64)
    if d.min() < 0 or (num_domains is not None and d.max() >= num_domains):
        raise ValueError(f"domain ids must lie in [0, {num_domains})")
    return d


class DomainSegmenter(BaseEstimator):
    """Segmentation model with domain-aware normalisation.

    Hyper-parameters mirror :class:`~dbnseg.train.TrainConfig`. ``fit`` takes
    per-sample domain ids next to images and masks; ``predict`` and ``score``
    take them too and run each domain with its own statistics.
    """

    def __init__(self, num_classes=None, num_domains=None, base_lr=0.01, poly_exponent=2.0, momentum=0.9,
                 batch_size=8, epochs=30, seed=0, norm="dbn", scales_train=(0.5, 1.0), aux_weight=0.4,
                 crop_size=48, flip=True, base_channels=16, low_channels=32, num_fusion_blocks=3,
                 key_channels=32, epsilon=1e-5, stats_momentum=0.1, scales=None):
        self.num_classes = num_classes
        self.num_domains = num_domains
        self.base_lr = base_lr
        self.poly_exponent = poly_exponent
        self.momentum = momentum
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.norm = norm
        self.scales_train = scales_train
        self.aux_weight = aux_weight
        self.crop_size = crop_size
        self.flip = flip
        self.base_channels = base_channels
        self.low_channels = low_channels
        self.num_fusion_blocks = num_fusion_blocks
        self.key_channels = key_channels
        self.epsilon = epsilon
        self.stats_momentum = stats_momentum
        self.scales = scales

    def _train_config(self) -> TrainConfig:
        params = self.get_params()
        kwargs = {f.name: params[f.name] for f in fields(TrainConfig) if f.name in params}
        kwargs["scales_train"] = tuple(kwargs["scales_train"])
        return TrainConfig(holdout_domain=-2, **kwargs)

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before predict or score")

    def fit(self, X, y, domains=None):
        X = check_images(X)
        y = check_masks(y, X, self.num_classes)
        d = check_domains(domains, len(X), self.num_domains)
        self.num_classes_ = self.num_classes or int(y.max()) + 1
        self.num_domains_ = self.num_domains or int(d.max()) + 1
        self.result_ = train(self._train_config(), SegDataset(X, y, d), self.num_classes_, self.num_domains_)
        self.model_ = self.result_.model
        return self

    def predict(self, X, domains=None, stats="running"):
        self._check_fitted()
        X = check_images(X)
        d = check_domains(domains, len(X), self.num_domains_)
        scales = self.scales or self.scales_train
        out = np.empty((len(X),) + X.shape[2:], np.int64)
        for dom in np.unique(d):
            rows = np.flatnonzero(d == dom)
            for k in range(0, len(rows), self.batch_size):
                chunk = rows[k:k + self.batch_size]
                out[chunk] = self.model_.predict(X[chunk], int(dom), scales, stats)
        return out

    def score(self, X, y, domains=None):
        """Mean IoU over all given samples."""
        self._check_fitted()
        X = check_images(X)
        y = check_masks(y, X, self.num_classes_)
        d = check_domains(domains, len(X), self.num_domains_)
        report = evaluate(self.model_, SegDataset(X, y, d), self.scales or self.scales_train, "running",
                          self.batch_size)
        value = report.mean_iou
        return float("nan") if value is None else value

