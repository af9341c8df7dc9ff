"""Per-step randomness of pretraining: patch dropping, modality and temporal masking."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

from ..geometry import ceil_half


class MaskPlanError(ValueError):
    pass


@dataclass(frozen=True)
class MaskConfig:
    n_rects: int = 5
    area: tuple[float, float] = (0.15, 0.20)
    aspect: tuple[float, float] = (0.75, 1.5)
    modality_mask_rate: float = 0.5
    max_resample: int = 20
    max_shrink: int = 8
    random_drop: bool = False

    def __post_init__(self):
        lo, hi = self.area
        if self.n_rects < 1 or not (0 < lo <= hi <= 1):
            raise MaskPlanError(f"invalid rectangle settings n={self.n_rects}, area={self.area}")
        a_lo, a_hi = self.aspect
        if not (0 < a_lo <= a_hi):
            raise MaskPlanError(f"invalid aspect range {self.aspect}")
        if not (0 <= self.modality_mask_rate <= 1):
            raise MaskPlanError("modality_mask_rate must lie in [0, 1]")


@dataclass(frozen=True)
class MaskPlan:
    per_axis: int
    dropped: tuple[int, ...]  # sorted
    masked: frozenset[tuple[int, str]]
    kept_timestamps: Mapping[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_patches(self) -> int:
        return self.per_axis**2

    @property
    def kept(self) -> tuple[int, ...]:
        d = set(self.dropped)
        return tuple(p for p in range(self.n_patches) if p not in d)

    def check(self, modalities: Sequence[str], T: Mapping[str, int] | None = None) -> None:
        """Raise :class:`MaskPlanError` if any plan invariant is violated."""
        if not self.dropped:
            raise MaskPlanError("no dropped patch")
        if not self.kept:
            raise MaskPlanError("every patch dropped")
        if len(set(self.dropped)) != len(self.dropped) or not all(0 <= p < self.n_patches for p in self.dropped):
            raise MaskPlanError("invalid dropped set")
        for p in self.kept:
            if all((p, m) in self.masked for m in modalities):
                raise MaskPlanError(f"kept patch {p} has every modality masked")
        dropped = set(self.dropped)
        if any(p in dropped for p, _ in self.masked):
            raise MaskPlanError("masked token on a dropped patch")
        for m, n in (T or {}).items():
            kept = self.kept_timestamps.get(m)
            if kept is None or len(kept) != ceil_half(n) or len(set(kept.tolist())) != len(kept):
                raise MaskPlanError(f"{m}: expected {ceil_half(n)} distinct kept timestamps of {n}")
            if np.any(np.diff(kept) <= 0) or kept.min() < 0 or kept.max() >= n:
                raise MaskPlanError(f"{m}: kept timestamps must be sorted indices in [0, {n})")


def _rectangle(rng: np.random.Generator, cfg: MaskConfig, shrink: float) -> tuple[float, float, float, float]:
    area = rng.uniform(*cfg.area) * shrink
    ratio = math.exp(rng.uniform(math.log(cfg.aspect[0]), math.log(cfg.aspect[1])))
    h = min(1.0, math.sqrt(area * ratio))
    w = min(1.0, math.sqrt(area / ratio))
    x0 = rng.uniform(0.0, 1.0 - w)
    y0 = rng.uniform(0.0, 1.0 - h)
    return x0, y0, w, h


def _cells(lo: float, size: float, n: int) -> range:
    """Grid cells of ``[0, 1)`` split ``n`` ways with positive overlap with ``[lo, lo + size]``."""
    first = min(n - 1, int(math.floor(lo * n)))
    last = max(first, int(math.ceil((lo + size) * n)) - 1)
    return range(first, min(last, n - 1) + 1)


def rectangle_drop(per_axis: int, rng: np.random.Generator, cfg: MaskConfig, shrink: float = 1.0) -> set[int]:
    dropped: set[int] = set()
    for _ in range(cfg.n_rects):
        x0, y0, w, h = _rectangle(rng, cfg, shrink)
        for y in _cells(y0, h, per_axis):
            for x in _cells(x0, w, per_axis):
                dropped.add(y * per_axis + x)
    return dropped


def sample_dropped(per_axis: int, rng: np.random.Generator, cfg: MaskConfig) -> set[int]:
    """Union of rectangles, resampled then shrunk until at least one patch survives."""
    n = per_axis * per_axis
    for _ in range(cfg.max_resample):
        d = rectangle_drop(per_axis, rng, cfg)
        if len(d) < n:
            return d
    shrink = 1.0
    for _ in range(cfg.max_shrink):
        shrink *= 0.5
        d = rectangle_drop(per_axis, rng, cfg, shrink)
        if len(d) < n:
            return d
    return {int(rng.integers(n))}


@lru_cache(maxsize=64)
def expected_drop_rate(per_axis: int, cfg: MaskConfig, n_samples: int = 2000) -> float:
    """Monte Carlo mean fraction of patches dropped by rectangle sampling (fixed seed)."""
    rng = np.random.default_rng(20240)
    total = sum(len(sample_dropped(per_axis, rng, cfg)) for _ in range(n_samples))
    return total / (n_samples * per_axis * per_axis)


def random_dropped(per_axis: int, rng: np.random.Generator, cfg: MaskConfig) -> set[int]:
    """Ablation: i.i.d. per-patch dropping at the rectangle sampler's expected rate."""
    n = per_axis * per_axis
    rate = expected_drop_rate(per_axis, cfg)
    draw = rng.random(n) < rate
    if draw.all():
        draw[int(rng.integers(n))] = False
    if not draw.any():
        draw[int(rng.integers(n))] = True
    return set(np.flatnonzero(draw).tolist())


def sample_mask_plan(
    per_axis: int,
    modalities: Sequence[str],
    T: Mapping[str, int],
    rng: np.random.Generator,
    cfg: MaskConfig = MaskConfig(),
) -> MaskPlan:
    """Draw 𝒟, the modality mask on surviving patches, and the kept timestamps.

    ``modalities`` lists the patch (non-context) modalities; ``T`` maps every
    modality whose timestamps should be subsampled to its length.
    """
    if per_axis * per_axis < 2:
        raise MaskPlanError("pretraining needs at least 2 patches per tile; use a smaller patch size")
    dropped = (random_dropped if cfg.random_drop else sample_dropped)(per_axis, rng, cfg)
    kept = [p for p in range(per_axis * per_axis) if p not in dropped]

    masked: set[tuple[int, str]] = set()
    mods = list(modalities)
    if len(mods) > 1:
        draws = rng.random((len(kept), len(mods))) < cfg.modality_mask_rate
        for i, p in enumerate(kept):
            if draws[i].all():
                draws[i, int(rng.integers(len(mods)))] = False
            masked.update((p, m) for j, m in enumerate(mods) if draws[i, j])

    kept_t = {}
    for m in sorted(T):
        n = int(T[m])
        kept_t[m] = np.sort(rng.choice(n, size=ceil_half(n), replace=False)).astype(np.int64)
    return MaskPlan(per_axis, tuple(sorted(dropped)), frozenset(masked), kept_t)
