"""Deterministic synthetic multimodal tiles.

A latent class is drawn for every cell of the finest patch grid. Each modality
renders a cell's class through a fixed per-class signature: a channel vector
modulated by a sinusoid of class-specific frequency over the day of year.
Optional per-tile, per-modality offsets act as sensor nuisance that differs
between modalities while the semantics stay shared.

The class field is either i.i.d. per cell or made of Voronoi regions around a
few random seed points, which gives contiguous parcels whose content can be
inferred from neighbouring cells.
"""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .specs import ValidatedDataset
from .tilefile import TileLabels, TileSample, store_tile

LABEL_MODES = ("semantic", "change")
FIELDS = ("iid", "voronoi")


class SyntheticConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticConfig:
    seed: int = 0
    K: int = 4
    noise_std: float = 0.1
    mixing_seed: int = 1234
    temporal_amplitude: float = 0.5
    nuisance_std: float = 0.0
    label_mode: str = "semantic"
    field: str = "iid"
    n_regions: int = 4

    def __post_init__(self):
        if self.K < 2:
            raise SyntheticConfigError(f"K must be >= 2, got {self.K}")
        if self.noise_std < 0 or self.nuisance_std < 0:
            raise SyntheticConfigError("noise_std and nuisance_std must be >= 0")
        if self.label_mode not in LABEL_MODES:
            raise SyntheticConfigError(f"label_mode must be one of {LABEL_MODES}")
        if self.field not in FIELDS:
            raise SyntheticConfigError(f"field must be one of {FIELDS}")
        if self.n_regions < 1:
            raise SyntheticConfigError("n_regions must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def _stable(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


@dataclass(frozen=True)
class _Signature:
    channels: np.ndarray  # (K, C)
    freq: np.ndarray  # (K,) cycles per year
    phase: np.ndarray  # (K,)


def class_signatures(modality: str, C: int, cfg: SyntheticConfig) -> _Signature:
    rng = np.random.default_rng([cfg.mixing_seed, _stable(modality)])
    channels = rng.normal(0.0, 1.0, size=(cfg.K, C))
    freq = 1.0 + np.arange(cfg.K, dtype=np.float64)
    phase = rng.uniform(0, 2 * np.pi, size=cfg.K)
    return _Signature(channels, freq, phase)


def _render(sig: _Signature, z: np.ndarray, doy: np.ndarray | None, amp: float) -> np.ndarray:
    """Noise-free series for a class field ``z (H, W)`` -> ``(H, W, T, C)``."""
    base = sig.channels[z]  # (H, W, C)
    if doy is None:
        return base[:, :, None, :]
    angle = 2 * np.pi * sig.freq[z][..., None] * doy[None, None, :] / 366.0 + sig.phase[z][..., None]
    mod = 1.0 + amp * np.sin(angle)  # (H, W, T)
    return base[:, :, None, :] * mod[..., None]


def _upsample(field: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(field, factor, axis=0), factor, axis=1)


def _draw_field(rng: np.random.Generator, cells: int, cfg: SyntheticConfig) -> np.ndarray:
    if cfg.field == "iid":
        return rng.integers(0, cfg.K, size=(cells, cells))
    seeds = rng.uniform(0, cells, size=(cfg.n_regions, 2))
    labels = rng.integers(0, cfg.K, size=cfg.n_regions)
    centres = np.arange(cells) + 0.5
    yy, xx = np.meshgrid(centres, centres, indexing="ij")
    d2 = (yy[..., None] - seeds[:, 0]) ** 2 + (xx[..., None] - seeds[:, 1]) ** 2
    return labels[np.argmin(d2, axis=-1)]


def latent_field(dataset: ValidatedDataset, cfg: SyntheticConfig, tile_id: int) -> np.ndarray:
    """Class of every cell of the finest patch grid, as drawn by :func:`generate_tile`."""
    return _draw_field(_tile_rng(dataset, cfg, tile_id), _cells_per_axis(dataset), cfg)


def _tile_rng(dataset: ValidatedDataset, cfg: SyntheticConfig, tile_id: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, _stable(dataset.name), tile_id])


def _cells_per_axis(dataset: ValidatedDataset) -> int:
    return round(dataset.spec.S_d / min(dataset.spec.P_d))


def generate_tile(dataset: ValidatedDataset, cfg: SyntheticConfig, tile_id: int) -> TileSample:
    """Render one tile; a pure function of ``(cfg, dataset, tile_id)``."""
    spec = dataset.spec
    rng = _tile_rng(dataset, cfg, tile_id)
    cells = _cells_per_axis(dataset)
    z = _draw_field(rng, cells, cfg)
    cell_m = spec.S_d / cells

    changed = change_doy = z_after = None
    if cfg.label_mode == "change":
        changed = rng.random((cells, cells)) < 0.5
        shift = rng.integers(1, cfg.K, size=(cells, cells))
        z_after = np.where(changed, (z + shift) % cfg.K, z)
        change_doy = int(rng.integers(60, 300))

    arrays: dict[str, np.ndarray] = {}
    dates: dict[str, np.ndarray] = {}
    for m in spec.modalities:
        ms = dataset.modalities[m]
        sig = class_signatures(m, ms.C_m, cfg)
        t_min, t_max = ms.T_range
        T = int(rng.integers(t_min, t_max + 1))
        doy = None
        if ms.has_dates or T > 1:
            doy = np.sort(rng.choice(np.arange(1, 367), size=T, replace=False)) if ms.has_dates else np.arange(1, T + 1)
        if ms.is_context:
            # one pixel covering (and exceeding) the tile: average of the cells' signals
            full = _render(sig, z, doy if ms.is_time_series else None, cfg.temporal_amplitude)
            clean = full.mean(axis=(0, 1), keepdims=True)
        else:
            side = dataset.spatial_side(m)
            factor = side // cells
            if factor >= 1 and side % cells == 0:
                zf = _upsample(z, factor)
                za = _upsample(z_after, factor) if z_after is not None else None
            else:  # modality coarser than the class cells: sample the cell under each pixel centre
                centers = ((np.arange(side) + 0.5) * ms.R_m / cell_m).astype(int)
                zf = z[np.ix_(centers, centers)]
                za = z_after[np.ix_(centers, centers)] if z_after is not None else None
            t_dates = doy if ms.is_time_series else None
            clean = _render(sig, zf, t_dates, cfg.temporal_amplitude)
            if za is not None and t_dates is not None:
                after = _render(sig, za, t_dates, cfg.temporal_amplitude)
                clean = np.where((t_dates >= change_doy)[None, None, :, None], after, clean)
        x = clean + rng.normal(0.0, cfg.noise_std, size=clean.shape) if cfg.noise_std > 0 else clean
        if cfg.nuisance_std > 0:
            x = x + rng.normal(0.0, cfg.nuisance_std, size=(1, 1, 1, ms.C_m))
        mask = spec.channel_masks.get(m)
        if mask is not None:
            x = x[..., np.asarray(mask, dtype=bool)]
        arrays[m] = np.ascontiguousarray(x, dtype=np.float32)
        if ms.has_dates:
            dates[m] = doy.astype(np.int64)

    res = dataset.label_resolution()
    label_side = round(spec.S_d / res)
    centers = ((np.arange(label_side) + 0.5) * res / cell_m).astype(int)
    if cfg.label_mode == "change":
        pixel = changed.astype(np.int64)[np.ix_(centers, centers)]
    else:
        pixel = z[np.ix_(centers, centers)]
    counts = np.bincount(pixel.ravel(), minlength=2 if cfg.label_mode == "change" else cfg.K)
    labels = TileLabels(
        classes_present=sorted(int(c) for c in np.unique(pixel)),
        dominant=int(np.argmax(counts)),
        pixel=pixel,
        pixel_resolution=float(res),
    )
    return TileSample(spec.name, tile_id, arrays, dates, labels)


def num_classes(cfg: SyntheticConfig) -> int:
    return 2 if cfg.label_mode == "change" else cfg.K


def synth_generate(dataset: ValidatedDataset, cfg: SyntheticConfig, out_dir: str | Path, config_hash: str = "") -> dict:
    """Write every tile of ``dataset`` plus ``manifest.json``; return the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    extra = {"config_hash": config_hash} if config_hash else None
    for tile_id in range(dataset.spec.num_tiles):
        fname = f"tile_{tile_id:05d}.anysat"
        store_tile(out / fname, generate_tile(dataset, cfg, tile_id), extra)
        files.append(fname)
    manifest = {
        "format": "anysat-dataset",
        "version": 1,
        "spec": dataset.spec.to_dict(),
        "modalities": [dataset.modalities[m].to_dict() for m in dataset.spec.modalities],
        "synthetic": cfg.to_dict(),
        "num_classes": num_classes(cfg),
        "config_hash": config_hash,
        "tiles": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def directory_checksum(path: str | Path) -> str:
    h = hashlib.sha256()
    for f in sorted(Path(path).rglob("*")):
        if f.is_file():
            h.update(str(f.relative_to(path)).encode())
            h.update(f.read_bytes())
    return h.hexdigest()
