"""Central-difference gradient checking."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Parameter, Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str | None
    worst_index: tuple[int, ...] | None
    n_checked: int
    flagged: list[tuple[str, tuple[int, ...], float]] = field(default_factory=list)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def _value(f: Callable[[], Tensor]) -> float:
    out = f()
    v = float(out.data) if isinstance(out, Tensor) else float(out)
    if not math.isfinite(v):
        raise FloatingPointError(f"grad_check: objective is not finite ({v})")
    return v


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    h: float = 1e-5,
    *,
    max_coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
    flag_tol: float = 1e-4,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` takes no arguments and closes over ``params``. The relative error of a
    coordinate is ``|a - n| / max(|a|, |n|, floor)``; below ``floor`` it reads as
    an absolute error. ``max_coords_per_param`` samples coordinates at random
    (``rng``) instead of sweeping every entry.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"grad_check: h must lie in [1e-7, 1e-3], got {h}")
    for p in params:
        p.grad = None
    root = f()
    _value(lambda: root)
    backward(root, params=params)
    analytic = {p.name: p.grad.copy() for p in params}

    rng = rng or np.random.default_rng(0)
    worst = (-1.0, None, None)
    flagged = []
    n_checked = 0
    for p in params:
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords_per_param is not None and flat.size > max_coords_per_param:
            coords = np.sort(rng.choice(flat.size, max_coords_per_param, replace=False))
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = _value(f)
            flat[c] = orig - h
            fm = _value(f)
            flat[c] = orig
            num = (fp - fm) / (2 * h)
            ana = analytic[p.name].reshape(-1)[c]
            rel = abs(ana - num) / max(abs(ana), abs(num), floor)
            idx = tuple(int(i) for i in np.unravel_index(c, p.shape))
            n_checked += 1
            if rel > flag_tol:
                flagged.append((p.name, idx, rel))
            if rel > worst[0]:
                worst = (rel, p.name, idx)
    return GradCheckReport(max(worst[0], 0.0), worst[1], worst[2], n_checked, flagged)
