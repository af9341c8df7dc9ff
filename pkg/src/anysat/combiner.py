"""Modality combiner: fuse per-modality patch tokens into one vector per patch.

Tokens carry patch positional encodings (context tokens do not), go through a
stack of self-attention blocks, and are then read out by cross-attention from
one query per patch (a shared learned seed plus that patch's encoding) and,
optionally, a tile-level class query. A patch query sees the tokens of its own
patch plus the tile-wide context tokens; the class query sees every token.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .encoder import EmbeddingMap
from .geometry import grid_encoding
from .nn import CrossAttentionBlock, LayerNorm, Module, Stack
from .numerics import Tensor


class CombinerInputError(ValueError):
    pass


@dataclass
class TokenSet:
    """Flat list of (patch, modality, vector) triples, vectors stacked as (n, E)."""

    patch_ids: np.ndarray
    modalities: list[str]
    vectors: Tensor

    def __len__(self) -> int:
        return len(self.patch_ids)

    def permuted(self, order: Sequence[int]) -> TokenSet:
        order = np.asarray(order, dtype=np.int64)
        return TokenSet(self.patch_ids[order], [self.modalities[i] for i in order], self.vectors[order])


def tokens_from_map(em: EmbeddingMap, modalities: Sequence[str] | None = None) -> TokenSet:
    mods = list(em.unimodal) if modalities is None else list(modalities)
    n = em.n_patches
    ids = np.concatenate([np.arange(n) for _ in mods]) if mods else np.zeros(0, dtype=np.int64)
    names = [m for m in mods for _ in range(n)]
    return TokenSet(ids, names, nx.concat([em.unimodal[m] for m in mods], axis=0))


@dataclass
class MultimodalEmbeddings:
    patch_ids: np.ndarray  # sorted patch indices covered
    per_patch: Tensor  # (len(patch_ids), E)
    tile: Tensor | None = None  # (E,)

    def as_dict(self) -> dict[int, np.ndarray]:
        return {int(p): self.per_patch.data[i] for i, p in enumerate(self.patch_ids)}


class Combiner(Module):
    def __init__(self, E: int = 64, heads: int = 4, depth: int = 3, mlp_ratio: float = 2.0, name: str = "combiner"):
        super().__init__(name)
        self.E = E
        self.blocks = Stack(f"{name}/sa", E, heads, depth, mlp_ratio)
        self.cross = CrossAttentionBlock(f"{name}/ca", E, heads, mlp_ratio)
        self.norm = LayerNorm(f"{name}/norm", E)
        self.declare("query", (E,), "normal:0.02")
        self.declare("cls_query", (E,), "normal:0.02")

    def __call__(
        self,
        params,
        tokens: TokenSet,
        context: Sequence[Tensor] = (),
        per_axis: int = 1,
        P: float = 1.0,
        want_tile_embedding: bool = False,
    ) -> MultimodalEmbeddings:
        if len(tokens) == 0:
            raise CombinerInputError("combiner needs at least one token")
        ids = np.asarray(tokens.patch_ids, dtype=np.int64)
        if ids.min() < 0 or ids.max() >= per_axis * per_axis:
            raise CombinerInputError(f"patch index outside the {per_axis}x{per_axis} grid")
        pairs = set(zip(ids.tolist(), tokens.modalities))
        if len(pairs) != len(ids):
            raise CombinerInputError("duplicate (patch, modality) token")
        pos = grid_encoding(per_axis, self.E, float(P))
        seq = tokens.vectors + pos[ids]
        if context:
            seq = nx.concat([seq] + [c.reshape(-1, self.E) for c in context], axis=0)
        seq = self.blocks(params, seq.reshape(1, -1, self.E))

        patch_ids = np.unique(ids)
        n_ctx = sum(int(np.prod(c.shape)) // self.E for c in context)
        allowed = np.concatenate(
            [patch_ids[:, None] == ids[None, :], np.ones((len(patch_ids), n_ctx), dtype=bool)], axis=1
        )
        queries = self.p(params, "query") + pos[patch_ids]
        if want_tile_embedding:
            queries = nx.concat([queries, self.p(params, "cls_query").reshape(1, self.E)], axis=0)
            allowed = np.concatenate([allowed, np.ones((1, allowed.shape[1]), dtype=bool)], axis=0)
        out = self.cross(params, queries.reshape(1, -1, self.E), seq, allowed=allowed)
        out = self.norm(params, out).reshape(-1, self.E)
        if want_tile_embedding:
            n = len(patch_ids)
            return MultimodalEmbeddings(patch_ids, out[:n], out[n])
        return MultimodalEmbeddings(patch_ids, out)


def attach_context(em: EmbeddingMap) -> list[Tensor]:
    """Context tokens of an encoded tile, one per context modality (possibly none)."""
    return [em.context[m] for m in sorted(em.context)]
