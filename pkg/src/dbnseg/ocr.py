"""Object-contextual representation head.

Three steps: per-pixel soft region logits (supervised by the ground-truth
mask, one region per class), region representations as softmax-weighted
pixel averages, and pixel augmentation with an attention-weighted mix of the
region representations.
"""

from __future__ import annotations

import math

import numpy as np

from . import ops
from .backbone import make_norm
from .layers import Conv2d, Module
from .tensor import ShapeError, Tensor


class OcrHead(Module):
    def __init__(self, config, in_channels: int, num_classes: int, rng: np.random.Generator,
                 key_channels: int = 32, name: str = "ocr"):
        if num_classes < 2:
            raise ValueError("OCR needs at least 2 regions")
        if key_channels < 1:
            raise ValueError("key_channels must be >= 1")
        self.num_classes = num_classes
        self.key_channels = key_channels
        self.region_scorer = Conv2d(f"{name}.region_scorer", in_channels, num_classes, 1, rng=rng)
        self.query = Conv2d(f"{name}.query", in_channels, key_channels, 1, rng=rng)
        self.key = Conv2d(f"{name}.key", in_channels, key_channels, 1, rng=rng)
        self.value = Conv2d(f"{name}.value", in_channels, key_channels, 1, rng=rng)
        self.transform = Conv2d(f"{name}.transform", in_channels + key_channels, in_channels, 1, rng=rng)
        self.norm = make_norm(config, in_channels, f"{name}.norm")

    def __call__(self, features: Tensor, domain, mode: str = "train"):
        """Return ``(augmented_features, region_logits)``."""
        logits = soft_region_scores(self, features)
        regions = region_representations(features, logits)
        return object_contextual_augment(self, features, regions, domain, mode), logits


def soft_region_scores(head: OcrHead, features: Tensor) -> Tensor:
    """Raw per-pixel region logits ``[N, K, H, W]``."""
    return head.region_scorer(features)


def region_representations(features: Tensor, region_logits: Tensor) -> Tensor:
    """``f[n, k] = sum_i softmax_i(logits[n, k]) * x[n, :, i]`` as ``[N, K, C]``."""
    n, c, h, w = features.shape
    if region_logits.ndim != 4 or region_logits.shape[0] != n or region_logits.shape[2:] != (h, w):
        raise ShapeError(f"region logits {region_logits.shape} do not match features {features.shape}")
    k = region_logits.shape[1]
    weights = ops.softmax(ops.reshape(region_logits, (n, k, h * w)), axis=2)
    pixels = ops.transpose(ops.reshape(features, (n, c, h * w)), (0, 2, 1))
    return ops.bmm(weights, pixels)


def _project_regions(conv: Conv2d, regions: Tensor) -> Tensor:
    # regions [N, K, C] -> 1x1 conv over a [N, C, K, 1] grid -> [N, K, D]
    n, k, c = regions.shape
    grid = ops.reshape(ops.transpose(regions, (0, 2, 1)), (n, c, k, 1))
    proj = conv(grid)
    return ops.transpose(ops.reshape(proj, (n, proj.shape[1], k)), (0, 2, 1))


def pixel_region_weights(head: OcrHead, features: Tensor, regions: Tensor) -> Tensor:
    """Per-pixel softmax over regions of scaled query-key products, ``[N, HW, K]``."""
    n, c, h, w = features.shape
    if regions.ndim != 3 or regions.shape[0] != n or regions.shape[2] != c:
        raise ShapeError(f"region representations {regions.shape} do not match features {features.shape}")
    q = ops.transpose(ops.reshape(head.query(features), (n, head.key_channels, h * w)), (0, 2, 1))
    keys = ops.transpose(_project_regions(head.key, regions), (0, 2, 1))
    scores = ops.scalar_affine(ops.bmm(q, keys), 1.0 / math.sqrt(head.key_channels))
    return ops.softmax(scores, axis=2)


def object_contextual_augment(head: OcrHead, features: Tensor, regions: Tensor, domain, mode: str = "train") -> Tensor:
    """``y_i = relu(norm(transform([x_i, sum_k w_ik * value(f_k)])))``."""
    n, c, h, w = features.shape
    weights = pixel_region_weights(head, features, regions)
    values = _project_regions(head.value, regions)
    context = ops.bmm(weights, values)
    context = ops.reshape(ops.transpose(context, (0, 2, 1)), (n, head.key_channels, h, w))
    mixed = head.transform(ops.concat([features, context], axis=1))
    return ops.relu(head.norm(mixed, domain, mode))
