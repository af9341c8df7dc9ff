"""Scale-adaptive patch encoder.

Each modality has a projector that collapses time per pixel (LTAE for time
series, a linear map for single dates), flattens every sub-patch and maps it
to width E with an MLP. A transformer shared by all modalities then reads the
sub-patches of one patch, with ground-distance-aware positional encodings,
and returns its class-token output as the patch embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping

import numpy as np

from . import numerics as nx
from .data.padding import pad_channels
from .data.specs import ModalitySpec, ValidatedDataset
from .data.tilefile import TileSample
from .geometry import SubPatchLayout, TileGeometry, grid_encoding, subpatch_layout
from .nn import MLP, LayerNorm, Linear, Module, Stack
from .numerics import Tensor


@lru_cache(maxsize=256)
def _temporal_freqs(d: int) -> np.ndarray:
    k = np.arange(d // 2)
    return 183.0 ** (2 * k / d)


def temporal_encoding(doy: np.ndarray, d: int) -> np.ndarray:
    """Sinusoids of the normalised day of year, from 1 to ~183 cycles per year."""
    t = np.asarray(doy, dtype=np.float64) / 366.0
    angle = 2 * np.pi * t[:, None] * _temporal_freqs(d)[None, :]
    enc = np.empty((len(t), d))
    enc[:, 0::2] = np.sin(angle)
    enc[:, 1::2] = np.cos(angle)
    return enc


class LTAE(Module):
    """Lightweight temporal attention encoder: (N, T, C) -> (N, E).

    The input is projected to ``d_model`` channels and split into one channel
    group per head; each head attends over time with a learned master query.
    """

    def __init__(self, name: str, c_in: int, d_model: int, E: int, heads: int = 4, d_k: int = 8):
        super().__init__(name)
        if d_model % heads:
            raise ValueError(f"{name}: grouped width {d_model} not divisible by {heads} heads")
        self.d_model, self.heads, self.d_k = d_model, heads, d_k
        self.inp = Linear(f"{name}/in", c_in, d_model)
        self.in_norm = LayerNorm(f"{name}/in_norm", d_model)
        self.key = Linear(f"{name}/key", d_model, heads * d_k)
        self.declare("query", (heads, d_k), "normal:0.5")
        self.out = MLP(f"{name}/out", d_model, 2 * E, E)

    def __call__(self, params, x: Tensor, dates: np.ndarray, return_attention: bool = False):
        N, T, _ = x.shape
        H, dk, D = self.heads, self.d_k, self.d_model
        h = self.in_norm(params, self.inp(params, x)) + temporal_encoding(dates, D)
        keys = self.key(params, h).reshape(N, T, H, dk)
        scores = nx.sum_(keys * self.p(params, "query"), axis=-1) * (1.0 / np.sqrt(dk))  # (N, T, H)
        attn = nx.softmax(scores.transpose(0, 2, 1), axis=-1)  # (N, H, T)
        values = h.reshape(N, T, H, D // H).transpose(0, 2, 1, 3)  # (N, H, T, D/H)
        pooled = nx.matmul(attn.reshape(N, H, 1, T), values).reshape(N, D)
        out = self.out(params, pooled)
        return (out, attn) if return_attention else out

    def head_output(self, params, single: Tensor, date: int) -> Tensor:
        """What a length-1 series reduces to: the output MLP of its projected value."""
        h = self.in_norm(params, self.inp(params, single)) + temporal_encoding(np.array([date]), self.d_model)[0]
        return self.out(params, h)


class Projector(Module):
    """Per-modality sub-patch projector: (n_sub_pixels, T, C) -> (..., E)."""

    def __init__(self, name: str, spec: ModalitySpec, E: int, ltae_heads: int = 4, ltae_dk: int = 8):
        super().__init__(name)
        self.spec, self.E = spec, E
        if spec.is_time_series:
            self.temporal = LTAE(f"{name}/ltae", spec.C_m, E, E, ltae_heads, ltae_dk)
        else:
            self.temporal = Linear(f"{name}/linear", spec.C_m, E)
        self.mlp = MLP(f"{name}/mlp", spec.delta_m**2 * E, 2 * E, E)

    def collapse_time(self, params, pixels: Tensor, dates: np.ndarray) -> Tensor:
        """(N, T, C) -> (N, E)."""
        if self.spec.is_time_series:
            return self.temporal(params, pixels, dates)
        return self.temporal(params, pixels[:, 0, :])

    def project(self, params, pixels: Tensor, dates: np.ndarray, n_tokens: int, n_sub: int, delta_eff: int) -> Tensor:
        """Pixels ordered (token, sub-patch, dy, dx) -> sub-patch embeddings (n_tokens, n_sub, E)."""
        E, dm = self.E, self.spec.delta_m
        per_pixel = self.collapse_time(params, pixels, dates)
        sub = per_pixel.reshape(n_tokens * n_sub, delta_eff, delta_eff, E)
        if delta_eff < dm:
            # clamped sub-patch: place it in the top-left of a zero delta_m frame
            rows = n_tokens * n_sub
            sub = nx.concat([sub, np.zeros((rows, delta_eff, dm - delta_eff, E))], axis=2)
            sub = nx.concat([sub, np.zeros((rows, dm - delta_eff, dm, E))], axis=1)
        return self.mlp(params, sub.reshape(n_tokens, n_sub, dm * dm * E))


@dataclass
class EmbeddingMap:
    """Unimodal patch embeddings of one tile."""

    P: float
    per_axis: int
    unimodal: dict[str, Tensor]  # modality -> (n_patches, E)
    subpatch: dict[str, Tensor]  # modality -> (n_patches, n_sub, E)
    layouts: dict[str, SubPatchLayout]
    context: dict[str, Tensor] = field(default_factory=dict)  # modality -> (1, E)

    @property
    def n_patches(self) -> int:
        return self.per_axis**2

    def vector(self, patch: int, modality: str) -> np.ndarray:
        return self.unimodal[modality].data[patch]

    def keys(self) -> list[tuple[int, str]]:
        return [(p, m) for m in self.unimodal for p in range(self.n_patches)]


class PatchEncoder(Module):
    def __init__(
        self,
        registry: Mapping[str, ModalitySpec],
        E: int = 64,
        heads: int = 4,
        depth: int = 3,
        ltae_heads: int = 4,
        ltae_dk: int = 8,
        mlp_ratio: float = 2.0,
        name: str = "encoder",
    ):
        super().__init__(name)
        self.E = E
        self.registry = dict(registry)
        for m, ms in self.registry.items():
            if ms.is_context and ms.delta_m != 1:
                raise ValueError(f"context modality {m!r} must use delta_m = 1")
        self.projectors = {m: Projector(f"{name}/proj/{m}", ms, E, ltae_heads, ltae_dk) for m, ms in self.registry.items()}
        self.trans = Stack(f"{name}/trans", E, heads, depth, mlp_ratio)
        self.norm = LayerNorm(f"{name}/trans_norm", E)
        self.declare("cls", (E,), "normal:0.02")
        self.declare("pad_value", (1,), "zeros")

    def spatial(self, params, tokens: Tensor) -> Tensor:
        """(n_tokens, L, E) -> class-token outputs (n_tokens, E)."""
        n = tokens.shape[0]
        cls = nx.broadcast_to(self.p(params, "cls").reshape(1, 1, self.E), (n, 1, self.E))
        seq = nx.concat([cls, tokens], axis=1)
        return self.norm(params, self.trans(params, seq)[:, 0, :])

    def prepare(self, params, modality: str, x: np.ndarray, channel_mask=None) -> Tensor:
        ms = self.registry[modality]
        x = Tensor(np.asarray(x, dtype=np.float64))
        if x.shape[-1] != ms.C_m:
            x = pad_channels(x, ms.C_m, self.p(params, "pad_value"), channel_mask)
        return x

    def encode_modality(self, params, modality: str, x, dates: np.ndarray, P: float, per_axis: int):
        """Patch embeddings (n_patches, E) and sub-patch cache for one modality."""
        ms = self.registry[modality]
        layout = subpatch_layout(P, ms.R_m, ms.delta_m)
        n, c, d = per_axis, layout.count_per_axis, layout.delta_eff
        T, C = x.shape[2], x.shape[3]
        if x.shape[0] != n * c * d:
            raise nx.ShapeMismatchError(f"encode[{modality}]", x.shape, detail=f"expected side {n * c * d}")
        pix = x.reshape(n, c, d, n, c, d, T, C).transpose(0, 3, 1, 4, 2, 5, 6, 7).reshape(n * n * c * c * d * d, T, C)
        sub = self.projectors[modality].project(params, pix, dates, n * n, c * c, d)
        pos = grid_encoding(c, self.E, float(layout.subpatch_meters))
        return self.spatial(params, sub + pos), sub, layout

    def encode_context(self, params, modality: str, x, dates: np.ndarray) -> Tensor:
        """A context observation (1, 1, T, C) -> one token (1, E), no positional encoding."""
        T, C = x.shape[2], x.shape[3]
        pix = x.reshape(1, T, C)
        sub = self.projectors[modality].project(params, pix, dates, 1, 1, 1)
        return self.spatial(params, sub)

    def encode_patch(self, params, modality: str, token, dates: np.ndarray, P: float):
        """Encode a single token x_p^m of shape (P/R, P/R, T, C)."""
        f, sub, _ = self.encode_modality(params, modality, nx.as_tensor(token), dates, P, 1)
        return f[0], sub[0]

    def encode_tile(
        self,
        params,
        tile: TileSample,
        dataset: ValidatedDataset,
        P: float,
        kept_timestamps: Mapping[str, np.ndarray] | None = None,
    ) -> EmbeddingMap:
        geom = TileGeometry(dataset.spec.S_d, P)
        if not any(abs(P - q) < 1e-9 for q in dataset.spec.P_d):
            raise ValueError(f"patch size {P} not allowed for dataset {dataset.name} (P_d={dataset.spec.P_d})")
        unimodal, subpatch, layouts, context = {}, {}, {}, {}
        for m in dataset.spec.modalities:
            x, dates = tile_inputs(tile, m, kept_timestamps)
            xt = self.prepare(params, m, x, dataset.spec.channel_masks.get(m))
            if self.registry[m].is_context:
                context[m] = self.encode_context(params, m, xt, dates)
                continue
            f, sub, layout = self.encode_modality(params, m, xt, dates, P, geom.per_axis)
            unimodal[m], subpatch[m], layouts[m] = f, sub, layout
        return EmbeddingMap(P, geom.per_axis, unimodal, subpatch, layouts, context)


def tile_inputs(tile: TileSample, modality: str, kept_timestamps=None) -> tuple[np.ndarray, np.ndarray]:
    """Array and dates of one modality, restricted to the kept timestamps if given."""
    x = tile.arrays[modality]
    T = x.shape[2]
    dates = tile.dates.get(modality)
    if dates is None:
        dates = np.arange(1, T + 1)
    if kept_timestamps is not None and modality in kept_timestamps:
        idx = np.asarray(kept_timestamps[modality], dtype=np.int64)
        x = x[:, :, idx, :]
        dates = dates[idx]
    return x, dates
