from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import ops
from .tensor import Tape, Tensor, backward


@dataclass
class GradientReport:
    worst: float  # max relative error over the checked coordinates
    checked: int
    skipped: int  # coordinates whose +-eps probe crossed a kink
    worst_at: Optional[tuple] = None  # (tensor index, flat index)


def gradient_report(
    f: Callable,
    x: Union[Tensor, Sequence[Tensor]],
    eps: float = 1e-5,
    coords: Optional[int] = None,
    seed: int = 0,
    skip_kinks: bool = False,
) -> GradientReport:
    """Compare tape gradients with central differences, coordinate by coordinate.

    ``f(x)`` must return a scalar tensor. The entries of ``x`` are perturbed
    in place, so ``f`` may also ignore its argument and read the same tensors
    through a closure (e.g. model parameters). Relative error per coordinate
    uses the denominator ``max(|analytic|, |numeric|, 1e-8)``.

    ``coords`` limits the check to a seeded random subset of that many
    coordinates per tensor; ``None`` checks every coordinate.

    With ``skip_kinks`` the piecewise ops (relu, hardswish, clamps) record
    which piece every element lands in; a coordinate whose +eps or -eps
    evaluation lands any element in a different piece than the unperturbed
    pass is not a valid finite-difference probe and is counted as skipped.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    xs = [x] if isinstance(x, Tensor) else list(x)
    saved = [t.tracked for t in xs]
    for t in xs:
        t.tracked = True
    try:
        with ops.region_probe() as base_regions, Tape() as tape:
            loss = f(x)
        backward(loss, tape)
        analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in xs]
    finally:
        for t, s in zip(xs, saved):
            t.tracked = s

    def evaluate():
        if not skip_kinks:
            return float(f(x).data), True
        with ops.region_probe() as regions:
            value = float(f(x).data)
        return value, regions == base_regions

    rng = np.random.default_rng(seed)
    report = GradientReport(0.0, 0, 0)
    for k, (t, ga) in enumerate(zip(xs, analytic)):
        t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)  # a view, so writes reach t.data
        idx = np.arange(flat.size)
        if coords is not None and coords < flat.size:
            idx = rng.choice(flat.size, size=coords, replace=False)
        gflat = ga.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp, same_p = evaluate()
            flat[i] = orig - eps
            fm, same_m = evaluate()
            flat[i] = orig
            if not (same_p and same_m):
                report.skipped += 1
                continue
            num = (fp - fm) / (2.0 * eps)
            ana = float(gflat[i])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            report.checked += 1
            if err > report.worst or report.worst_at is None:
                report.worst = max(report.worst, err)
                report.worst_at = (k, int(i))
    return report


def check_gradients(
    f: Callable,
    x: Union[Tensor, Sequence[Tensor]],
    eps: float = 1e-5,
    coords: Optional[int] = None,
    seed: int = 0,
    skip_kinks: bool = False,
) -> float:
    """Max relative error between tape gradients and central differences.

    See ``gradient_report`` for the arguments.
    """
    return gradient_report(f, x, eps, coords, seed, skip_kinks).worst
