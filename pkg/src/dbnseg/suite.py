"""Finite-difference suite over every differentiable operation in the model.

Each case builds a small random instance from a seed and hands the op to
:func:`~dbnseg.gradcheck.grad_check`; module parameters are exposed as extra
inputs so they are checked in float64 too.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import hma, ocr, ops
from .backbone import BackboneConfig
from .gradcheck import GradCheckReport, grad_check
from .layers import parameter_slots
from .norm import DomainBatchNorm

TOLERANCE = 1e-4


def _bound(module, fn: Callable, n_data: int) -> tuple[Callable, list]:
    """Wrap ``fn(*data)`` so ``module``'s parameters become trailing inputs."""
    slots = parameter_slots(module)

    def op(*args):
        for (owner, attr), t in zip(slots, args[n_data:]):
            setattr(owner, attr, t)
        return fn(*args[:n_data])

    return op, [getattr(o, a).data for o, a in slots]


def _away_from_zero(rng, shape):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.05, 2.0, size=shape)


def _conv(rng, seed):
    stride = 1 + seed % 2
    x, k, b = rng.standard_normal((2, 3, 5, 5)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
    return grad_check(lambda x, k, b: ops.conv2d(x, k, b, stride, 1), [x, k, b], TOLERANCE, seed=seed)


def _bilinear(rng, seed):
    x = rng.standard_normal((1, 2, 4, 6))
    size = [(7, 9), (2, 3), (8, 12), (5, 4)][seed % 4]
    return grad_check(lambda x: ops.bilinear_resize(x, *size), [x], TOLERANCE, seed=seed)


def _softmax(rng, seed):
    return grad_check(lambda x: ops.softmax(x, axis=seed % 2), [rng.standard_normal((2, 5))], TOLERANCE, seed=seed)


def _relu(rng, seed):
    return grad_check(ops.relu, [_away_from_zero(rng, (3, 4))], TOLERANCE, seed=seed)


def _sigmoid(rng, seed):
    return grad_check(ops.sigmoid, [3 * rng.standard_normal((3, 4))], TOLERANCE, seed=seed)


def _add(rng, seed):
    return grad_check(ops.add, [rng.standard_normal((2, 3, 2, 2)), rng.standard_normal((2, 1, 2, 2))], TOLERANCE, seed=seed)


def _mul(rng, seed):
    return grad_check(ops.mul, [rng.standard_normal((2, 3, 2, 2)), rng.standard_normal((2, 1, 2, 2))], TOLERANCE, seed=seed)


def _concat(rng, seed):
    return grad_check(lambda a, b: ops.concat([a, b], axis=1),
                      [rng.standard_normal((2, 2, 3, 3)), rng.standard_normal((2, 3, 3, 3))], TOLERANCE, seed=seed)


def _avg_pool(rng, seed):
    return grad_check(ops.avg_pool2, [rng.standard_normal((1, 2, 4, 6))], TOLERANCE, seed=seed)


def _log(rng, seed):
    return grad_check(ops.log, [rng.uniform(0.2, 3.0, (3, 4))], TOLERANCE, seed=seed)


def _affine(rng, seed):
    return grad_check(ops.channel_affine, [rng.standard_normal((2, 3, 2, 2)), rng.standard_normal(3),
                                           rng.standard_normal(3)], TOLERANCE, seed=seed)


def _bmm(rng, seed):
    return grad_check(ops.bmm, [rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 5))], TOLERANCE, seed=seed)


def _bn_train(rng, seed):
    x = rng.standard_normal((2, 3, 3, 3)) * 2 + 1
    return grad_check(lambda x, g, b: ops.batch_norm_train(x, g, b, 1e-5)[0],
                      [x, rng.standard_normal(3), rng.standard_normal(3)], TOLERANCE, seed=seed)


def _dbn_train(rng, seed):
    layer = DomainBatchNorm(3, num_domains=2)
    layer.gamma.data, layer.beta.data = rng.standard_normal(3), rng.standard_normal(3)
    op, params = _bound(layer, lambda x: layer.forward_train(x, seed % 2), 1)
    return grad_check(op, [rng.standard_normal((2, 3, 3, 3))] + params, TOLERANCE, seed=seed)


def _dbn_eval(rng, seed):
    layer = DomainBatchNorm(3, num_domains=2)
    layer.running_mean[:] = rng.standard_normal((2, 3))
    layer.running_var[:] = rng.uniform(0.5, 2.0, (2, 3))
    layer.updates[:] = 1
    layer.gamma.data, layer.beta.data = rng.standard_normal(3), rng.standard_normal(3)
    op, params = _bound(layer, lambda x: layer.forward_eval(x, seed % 2), 1)
    return grad_check(op, [rng.standard_normal((2, 3, 3, 3))] + params, TOLERANCE, seed=seed)


def _ocr_head(rng):
    head = ocr.OcrHead(BackboneConfig(num_domains=2), 4, 3, rng, key_channels=5)
    for o, a in parameter_slots(head):
        getattr(o, a).data = rng.standard_normal(getattr(o, a).shape) * 0.5
    return head


def _ocr_scores(rng, seed):
    head = _ocr_head(rng)
    op, params = _bound(head, lambda f: ocr.soft_region_scores(head, f), 1)
    return grad_check(op, [rng.standard_normal((2, 4, 3, 3))] + params, TOLERANCE, seed=seed)


def _ocr_regions(rng, seed):
    return grad_check(ocr.region_representations, [rng.standard_normal((2, 4, 3, 3)),
                                                   rng.standard_normal((2, 3, 3, 3))], TOLERANCE, seed=seed)


def _ocr_augment(rng, seed):
    head = _ocr_head(rng)
    mode = "train" if seed % 2 == 0 else "eval"
    head.norm.updates[:] = 1
    op, params = _bound(head, lambda f, r: ocr.object_contextual_augment(head, f, r, 0, mode), 2)
    # the key bias shifts every region score of a pixel equally; the value and
    # transform biases add per-channel constants that batch statistics cancel.
    # Their gradients are identically zero, so relative error there only
    # measures rounding noise.
    names = [p.name for p in head.parameters()]
    skip = {"ocr.key.bias"}
    if mode == "train":
        skip |= {"ocr.value.bias", "ocr.transform.bias"}
    wrt = [0, 1] + [2 + k for k, n in enumerate(names) if n not in skip]
    return grad_check(op, [rng.standard_normal((2, 4, 3, 3)), rng.standard_normal((2, 3, 4))] + params,
                      TOLERANCE, seed=seed, wrt=wrt)


def _attention(rng, seed):
    head = hma.AttentionHead(4, rng)
    for o, a in parameter_slots(head):
        getattr(o, a).data = rng.standard_normal(getattr(o, a).shape) * 0.5
    op, params = _bound(head, lambda f: hma.attention_mask(head, f), 1)
    return grad_check(op, [rng.standard_normal((1, 4, 4, 4))] + params, TOLERANCE, seed=seed)


def _fuse(rng, seed):
    mask = rng.uniform(0.05, 0.95, (2, 1, 2, 3))
    return grad_check(hma.fuse_two_scales, [rng.standard_normal((2, 3, 2, 3)), rng.standard_normal((2, 3, 4, 6)), mask],
                      TOLERANCE, seed=seed)


def _cross_entropy(rng, seed):
    mask = rng.integers(0, 3, (2, 3, 3))
    ignore = 2 if seed % 2 else None
    return grad_check(lambda l: ops.cross_entropy(l, mask, ignore), [rng.standard_normal((2, 3, 3, 3))],
                      TOLERANCE, seed=seed)


CASES: dict[str, Callable] = {
    "conv2d": _conv,
    "bilinear_resize": _bilinear,
    "softmax_axis": _softmax,
    "relu": _relu,
    "sigmoid": _sigmoid,
    "add": _add,
    "mul": _mul,
    "concat": _concat,
    "avg_pool2": _avg_pool,
    "log": _log,
    "channel_affine": _affine,
    "bmm": _bmm,
    "bn_forward_train": _bn_train,
    "dbn_forward_train": _dbn_train,
    "dbn_forward_eval": _dbn_eval,
    "soft_region_scores": _ocr_scores,
    "region_representations": _ocr_regions,
    "object_contextual_augment": _ocr_augment,
    "attention_mask": _attention,
    "fuse_two_scales": _fuse,
    "cross_entropy_loss": _cross_entropy,
}


@dataclass
class SuiteRow:
    name: str
    seeds: int
    max_rel_error: float
    worst_seed: int
    passed: bool
    seconds: float


def run_case(name: str, seed: int) -> GradCheckReport:
    return CASES[name](np.random.default_rng(seed), seed)


def run_suite(seeds: int = 20, names=None) -> list[SuiteRow]:
    rows = []
    for name in names or CASES:
        start = time.perf_counter()
        worst, worst_seed = 0.0, 0
        for seed in range(seeds):
            err = run_case(name, seed).max_rel_error
            if err > worst:
                worst, worst_seed = err, seed
        rows.append(SuiteRow(name, seeds, worst, worst_seed, worst <= TOLERANCE, time.perf_counter() - start))
    return rows


def format_table(rows: list[SuiteRow]) -> str:
    lines = [f"{'operation':<28}{'seeds':>6}{'max rel err':>14}  result"]
    for r in rows:
        lines.append(f"{r.name:<28}{r.seeds:>6}{r.max_rel_error:>14.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
