"""Central finite-difference verification of vector-Jacobian products."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tape, Tensor


@dataclass
class InputReport:
    index: int
    max_rel_error: float
    worst_coord: tuple
    analytic: float
    numeric: float
    checked: int


@dataclass
class GradCheckReport:
    tolerance: float
    inputs: list[InputReport] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((r.max_rel_error for r in self.inputs), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def worst(self) -> Optional[InputReport]:
        return max(self.inputs, key=lambda r: r.max_rel_error, default=None)

    def __str__(self) -> str:
        w = self.worst()
        if w is None:
            return "grad_check: no inputs checked"
        status = "PASS" if self.passed else "FAIL"
        return (f"grad_check {status}: max rel err {w.max_rel_error:.3e} at input {w.index} "
                f"coord {w.worst_coord} (analytic {w.analytic:.6e}, numeric {w.numeric:.6e})")


def relative_error(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))


def grad_check(
    op: Callable[..., Tensor],
    inputs: Sequence,
    tolerance: float = 1e-4,
    step: float = 1e-4,
    seed: int = 0,
    wrt: Optional[Sequence[int]] = None,
    max_coords: Optional[int] = None,
) -> GradCheckReport:
    """Compare ``op``'s tape VJP against central differences in float64.

    The scalar probed is ``sum(r * op(*inputs))`` for a fixed random ``r``.
    ``wrt`` restricts which inputs are checked; ``max_coords`` samples that
    many coordinates per input instead of all of them. Exceedances are
    reported, never raised.
    """
    # own stream so the cotangent never aliases caller data drawn from the same seed
    rng = np.random.default_rng([seed, 0x5EED])
    xs = [Tensor(np.array(getattr(x, "data", x), dtype=np.float64), requires_grad=True) for x in inputs]
    wrt = list(range(len(xs))) if wrt is None else list(wrt)
    with Tape() as tape:
        out = op(*xs)
    cot = rng.standard_normal(out.shape)
    analytic = tape.gradient(out, [xs[i] for i in wrt], cotangent=cot)

    def probe(arrays):
        return float(np.sum(op(*[Tensor(a) for a in arrays]).data * cot))

    report = GradCheckReport(tolerance=tolerance)
    base = [x.data for x in xs]
    for i, ga in zip(wrt, analytic):
        x = base[i]
        coords = list(np.ndindex(*x.shape)) if x.ndim else [()]
        if max_coords is not None and len(coords) > max_coords:
            pick = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[k] for k in sorted(pick)]
        worst = InputReport(i, -1.0, (), 0.0, 0.0, len(coords))
        for c in coords:
            arrays = list(base)
            plus, minus = x.copy(), x.copy()
            plus[c] += step
            minus[c] -= step
            arrays[i] = plus
            fp = probe(arrays)
            arrays[i] = minus
            fm = probe(arrays)
            num = (fp - fm) / (2 * step)
            err = float(relative_error(ga[c], num))
            if err > worst.max_rel_error:
                worst = InputReport(i, err, tuple(int(k) for k in c), float(ga[c]), num, len(coords))
        worst.max_rel_error = max(worst.max_rel_error, 0.0)
        report.inputs.append(worst)
    return report
