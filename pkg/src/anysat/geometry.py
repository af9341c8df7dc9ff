"""Tile / patch / sub-patch arithmetic and scale-adaptive positional encodings."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

_TOL = 1e-9


class GeometryError(ValueError):
    pass


class DivisibilityError(GeometryError):
    def __init__(self, S: float, P: float):
        self.S, self.P = S, P
        super().__init__(f"tile side S={S} m is not divisible by patch side P={P} m")


class LayoutError(GeometryError):
    pass


def _exact_ratio(num: float, den: float) -> int | None:
    """``num / den`` as an int if it is one (up to float noise), else None."""
    q = num / den
    r = round(q)
    if r >= 1 and abs(q - r) <= _TOL * max(1.0, abs(q)):
        return int(r)
    return None


@dataclass(frozen=True)
class TileGeometry:
    S: float
    P: float

    def __post_init__(self):
        if self.P <= 0 or self.S <= 0:
            raise GeometryError(f"S and P must be positive (S={self.S}, P={self.P})")
        if _exact_ratio(self.S, self.P) is None:
            raise DivisibilityError(self.S, self.P)

    @property
    def per_axis(self) -> int:
        return _exact_ratio(self.S, self.P)

    @property
    def total(self) -> int:
        return self.per_axis**2

    def position(self, index: int) -> tuple[int, int]:
        """(pos_x, pos_y) of a row-major patch index."""
        n = self.per_axis
        if not 0 <= index < n * n:
            raise GeometryError(f"patch index {index} outside grid of {n * n}")
        return index % n, index // n

    def index(self, pos_x: int, pos_y: int) -> int:
        n = self.per_axis
        if not (0 <= pos_x < n and 0 <= pos_y < n):
            raise GeometryError(f"patch position ({pos_x}, {pos_y}) outside {n}x{n} grid")
        return pos_y * n + pos_x

    def positions(self) -> np.ndarray:
        """Array (total, 2) of (pos_x, pos_y), row-major from the top-left."""
        n = self.per_axis
        ys, xs = np.divmod(np.arange(n * n), n)
        return np.stack([xs, ys], axis=1)


@dataclass(frozen=True)
class PatchGrid:
    count_per_axis: int
    total: int
    positions: np.ndarray


def patch_grid(S: float, P: float) -> PatchGrid:
    geom = TileGeometry(S, P)
    return PatchGrid(geom.per_axis, geom.total, geom.positions())


@dataclass(frozen=True)
class SubPatchLayout:
    R_m: float
    delta_m: int
    delta_eff: int
    count_per_axis: int
    pixels_per_patch: int

    @property
    def total(self) -> int:
        return self.count_per_axis**2

    @property
    def subpatch_meters(self) -> float:
        return self.R_m * self.delta_eff

    @property
    def clamped(self) -> bool:
        return self.delta_eff < self.delta_m


def subpatch_layout(P: float, R_m: float, delta_m: int) -> SubPatchLayout:
    """Split a P-meter patch of an R_m-m/pixel modality into sub-patches.

    The sub-patch side is clamped to the patch side in pixels, so a requested
    sub-patch larger than the patch becomes the whole patch.
    """
    if R_m <= 0 or delta_m < 1:
        raise LayoutError(f"need R_m > 0 and delta_m >= 1 (R_m={R_m}, delta_m={delta_m})")
    px = _exact_ratio(P, R_m)
    if px is None:
        raise LayoutError(f"P/R_m = {P}/{R_m} is not a positive integer pixel count")
    delta_eff = min(int(delta_m), px)
    if px % delta_eff:
        raise LayoutError(
            f"patch of {px} px is not divisible by sub-patch side {delta_eff} px "
            f"(P={P}, R_m={R_m}, delta_m={delta_m})"
        )
    return SubPatchLayout(R_m, int(delta_m), delta_eff, px // delta_eff, px)


@dataclass(frozen=True)
class PosEncodingSpec:
    E: int
    g: float
    G: float = 1.0

    def __post_init__(self):
        if self.E <= 0 or self.E % 2:
            raise GeometryError(f"positional-encoding width E must be even and positive, got {self.E}")
        if self.g <= 0 or self.G <= 0:
            raise GeometryError(f"g and G must be positive (g={self.g}, G={self.G})")


def _axis_encoding(pos: np.ndarray, spec: PosEncodingSpec) -> np.ndarray:
    i = np.arange(spec.E // 2)
    scaled = (spec.g * np.asarray(pos, dtype=np.float64)) / spec.G
    angle = scaled[..., None] / 10000.0 ** (i / spec.E) + (np.pi / 2) * (i % 2)
    return np.sin(angle)


def pos_encoding(pos_x, pos_y, spec: PosEncodingSpec) -> np.ndarray:
    """Scale-adaptive sinusoidal encoding; vectorised over position arrays.

    Returns ``(..., E)``: the x half followed by the y half.
    """
    return np.concatenate([_axis_encoding(pos_x, spec), _axis_encoding(pos_y, spec)], axis=-1)


@lru_cache(maxsize=512)
def grid_encoding(per_axis: int, E: int, g: float, G: float = 1.0) -> np.ndarray:
    """Encodings for every cell of a row-major ``per_axis`` x ``per_axis`` grid."""
    ys, xs = np.divmod(np.arange(per_axis * per_axis), per_axis)
    enc = pos_encoding(xs, ys, PosEncodingSpec(E, g, G))
    enc.setflags(write=False)
    return enc


def token_counts(S: float, P: float, R_m: float, delta_m: int) -> dict[str, int]:
    """Tokens per modality and sub-patches per token for one (S, P, R, delta)."""
    geom = TileGeometry(S, P)
    lay = subpatch_layout(P, R_m, delta_m)
    return {
        "patches": geom.total,
        "subpatches_per_patch": lay.total,
        "pixels_per_axis": geom.per_axis * lay.pixels_per_patch,
        "subpatch_side_m": lay.subpatch_meters,
    }


def tile_pixels(S: float, R_m: float) -> int:
    px = _exact_ratio(S, R_m)
    if px is None:
        raise LayoutError(f"S/R_m = {S}/{R_m} is not a positive integer pixel count")
    return px


def is_multiple(num: float, den: float) -> bool:
    return _exact_ratio(num, den) is not None


def ceil_half(n: int) -> int:
    return math.ceil(n / 2)
