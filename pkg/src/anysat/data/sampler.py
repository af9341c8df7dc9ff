"""Per-step choice of dataset, patch size and tiles for multi-dataset training."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .specs import DatasetSpec


class SamplerError(ValueError):
    pass


@dataclass(frozen=True)
class StepDraw:
    dataset_index: int
    dataset: str
    P: float
    tile_ids: tuple[int, ...]


def sample_step(datasets: Sequence[DatasetSpec], rng: np.random.Generator) -> StepDraw:
    """Pick a dataset (by weight, uniform by default), a patch size, and B_d distinct tiles."""
    if not datasets:
        raise SamplerError("no datasets to sample from")
    for d in datasets:
        if d.B_d > d.num_tiles:
            raise SamplerError(f"{d.name}: batch size {d.B_d} exceeds the {d.num_tiles} available tiles")
    weights = np.array([d.weight for d in datasets], dtype=np.float64)
    k = int(rng.choice(len(datasets), p=weights / weights.sum()))
    d = datasets[k]
    P = float(d.P_d[int(rng.integers(len(d.P_d)))])
    tiles = rng.choice(d.num_tiles, size=d.B_d, replace=False)
    return StepDraw(k, d.name, P, tuple(int(t) for t in tiles))
