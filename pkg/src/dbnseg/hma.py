"""Hierarchical multi-scale attention fusion.

A single attention head is learned for one adjacent scale pair. It predicts
a dense mask from the coarser scale's features; the mask weights the
upsampled coarse logits and ``1 - mask`` weights the finer logits. Chaining
this pairwise fusion from coarsest to finest extends inference to scales
never seen in training without any new parameters.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import ops
from .layers import Conv2d, Module
from .tensor import ShapeError, Tensor

TRAIN_SCALES = (0.5, 1.0)


class AttentionHead(Module):
    """conv3x3 (C -> C/2), relu, conv3x3 (C/2 -> 1), sigmoid.

    The last conv starts at zero, so an untrained head outputs 0.5 everywhere.
    """

    def __init__(self, in_channels: int, rng: np.random.Generator, name: str = "hma"):
        mid = max(1, in_channels // 2)
        self.conv1 = Conv2d(f"{name}.conv1", in_channels, mid, 3, rng=rng)
        self.conv2 = Conv2d(f"{name}.conv2", mid, 1, 3, zero_init=True)

    def __call__(self, features: Tensor) -> Tensor:
        return attention_mask(self, features)


def attention_mask(head: AttentionHead, coarse_features: Tensor) -> Tensor:
    """Dense mask ``[N, 1, h, w]`` with values in (0, 1)."""
    return ops.sigmoid(head.conv2(ops.relu(head.conv1(coarse_features))))


def fuse_two_scales(coarse_logits: Tensor, fine_logits: Tensor, mask: Tensor) -> Tensor:
    """``up(mask) * up(coarse) + (1 - up(mask)) * fine`` at the fine resolution."""
    if coarse_logits.ndim != 4 or fine_logits.ndim != 4 or mask.ndim != 4:
        raise ShapeError("fuse_two_scales expects rank-4 tensors")
    if coarse_logits.shape[:2] != fine_logits.shape[:2]:
        raise ShapeError(f"class/batch mismatch: coarse {coarse_logits.shape} vs fine {fine_logits.shape}")
    if mask.shape[0] != coarse_logits.shape[0] or mask.shape[1] != 1:
        raise ShapeError(f"mask must be [N, 1, h, w], got {mask.shape}")
    h, w = fine_logits.shape[2:]
    if coarse_logits.shape[2] > h or coarse_logits.shape[3] > w:
        raise ShapeError("coarse logits must not be larger than fine logits")
    up_logits = ops.bilinear_resize(coarse_logits, h, w)
    up_mask = ops.bilinear_resize(mask, h, w)
    return ops.add(ops.mul(up_mask, up_logits), ops.mul(ops.scalar_affine(up_mask, -1.0, 1.0), fine_logits))


def scaled_size(size: int, scale: float) -> int:
    """Nearest even size (at least 2) to ``size * scale``."""
    return max(2, 2 * int(round(size * scale / 2)))


def hierarchical_fuse(head: AttentionHead, forward_scale: Callable[[Tensor], tuple], image: Tensor,
                      scales: Sequence[float], return_parts: bool = False):
    """Fold per-scale logits coarse to fine with masks from ``head``.

    ``forward_scale(image)`` returns ``(logits, features, ...)`` for an
    input already resized to one scale; ``parts`` keeps each full tuple.
    The result sits at the scale-1.0 resolution.
    """
    scales = [float(s) for s in scales]
    if not scales:
        raise ValueError("hierarchical_fuse needs at least one scale")
    if any(s <= 0 for s in scales):
        raise ValueError(f"scales must be positive, got {scales}")
    if sorted(scales) != scales or len(set(scales)) != len(scales):
        raise ValueError(f"scales must be strictly ascending, got {scales}")
    if 1.0 not in scales:
        raise ValueError(f"scales must include 1.0, got {scales}")
    h, w = image.shape[2:]
    parts = []
    fused = None
    prev_features = None
    for s in scales:
        if s == 1.0:
            scaled = image
        else:
            scaled = ops.bilinear_resize(image, scaled_size(h, s), scaled_size(w, s))
        result = forward_scale(scaled)
        logits, features = result[0], result[1]
        parts.append((s,) + tuple(result))
        if fused is None:
            fused = logits
        else:
            fused = fuse_two_scales(fused, logits, head(prev_features))
        prev_features = features
    if fused.shape[2:] != (h, w):
        fused = ops.bilinear_resize(fused, h, w)
    return (fused, parts) if return_parts else fused


def training_cost(scales: Sequence[float]) -> float:
    """Relative training cost of a scale set, the sum of squared scales."""
    if not scales or any(s <= 0 for s in scales):
        raise ValueError("scales must be a non-empty list of positive numbers")
    return float(sum(s * s for s in scales))
