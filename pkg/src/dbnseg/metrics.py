"""Confusion matrices and intersection-over-union."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np


@dataclass
class MIoU:
    per_class: list[Optional[float]]   # None where the class never appears
    mean: Optional[float]              # None when no class appears at all

    @property
    def has_data(self) -> bool:
        return self.mean is not None


class ConfusionMatrix:
    """``counts[gt, pred]`` pixel table; rows are ground truth."""

    def __init__(self, num_classes: int, counts: Optional[np.ndarray] = None):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), np.int64) if counts is None else np.asarray(counts, np.int64)

    def update(self, gt, pred, ignore_id: Optional[int] = None) -> "ConfusionMatrix":
        gt, pred = np.asarray(gt).ravel(), np.asarray(pred).ravel()
        if gt.shape != pred.shape:
            raise ValueError(f"ground truth has {gt.size} pixels, prediction {pred.size}")
        if ignore_id is not None:
            keep = gt != ignore_id
            gt, pred = gt[keep], pred[keep]
        c = self.num_classes
        if gt.size and (gt.min() < 0 or gt.max() >= c or pred.min() < 0 or pred.max() >= c):
            raise ValueError(f"class ids must lie in [0, {c})")
        self.counts += np.bincount(gt.astype(np.int64) * c + pred, minlength=c * c).reshape(c, c)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def miou(conf: ConfusionMatrix) -> MIoU:
    """IoU per class as ``TP / (TP + FP + FN)``; absent classes skip the mean.

    Ratios are exact rationals rounded once, so results do not depend on
    summation order.
    """
    counts = conf.counts
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    denom = tp + fp + fn
    exact = [Fraction(int(t), int(d)) if d > 0 else None for t, d in zip(tp, denom)]
    present = [v for v in exact if v is not None]
    mean = float(sum(present) / len(present)) if present else None
    return MIoU([None if v is None else float(v) for v in exact], mean)
