"""The full architecture: patch encoder, combiner, predictor and the learned tokens."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from .combiner import Combiner, MultimodalEmbeddings, attach_context, tokens_from_map
from .data.specs import ModalitySpec, ValidatedDataset
from .data.tilefile import TileSample
from .encoder import EmbeddingMap, PatchEncoder
from .geometry import grid_encoding
from .nn import LayerNorm, Module, ParamTree, ParamTreeError, Stack
from .numerics import Tensor

BACKBONE = ("encoder", "combiner")


@dataclass(frozen=True)
class ModelConfig:
    E: int = 64
    heads: int = 4
    encoder_blocks: int = 3
    combiner_blocks: int = 3
    predictor_blocks: int = 3
    ltae_heads: int = 4
    ltae_dk: int = 8
    mlp_ratio: float = 2.0

    def __post_init__(self):
        if self.E % 2 or self.E % self.heads:
            raise ValueError(f"E={self.E} must be even and divisible by heads={self.heads}")

    def to_dict(self) -> dict:
        return asdict(self)


class Predictor(Module):
    """Residual positional-encoding add, self-attention blocks, final norm."""

    def __init__(self, E: int, heads: int, depth: int, mlp_ratio: float = 2.0, name: str = "predictor"):
        super().__init__(name)
        self.E = E
        self.blocks = Stack(f"{name}/sa", E, heads, depth, mlp_ratio)
        self.norm = LayerNorm(f"{name}/norm", E)

    def __call__(self, params, x: Tensor, per_axis: int, P: float) -> Tensor:
        h = x + grid_encoding(per_axis, self.E, float(P))
        return self.norm(params, self.blocks(params, h.reshape(1, -1, self.E))).reshape(-1, self.E)


class AnySat:
    def __init__(self, registry: Mapping[str, ModalitySpec], cfg: ModelConfig = ModelConfig()):
        self.cfg = cfg
        self.registry = dict(registry)
        E = cfg.E
        self.encoder = PatchEncoder(
            self.registry, E, cfg.heads, cfg.encoder_blocks, cfg.ltae_heads, cfg.ltae_dk, cfg.mlp_ratio
        )
        self.combiner = Combiner(E, cfg.heads, cfg.combiner_blocks, cfg.mlp_ratio)
        self.predictor = Predictor(E, cfg.heads, cfg.predictor_blocks, cfg.mlp_ratio)
        self.tokens = Module("tokens")
        self.tokens.declare("mask", (E,), "normal:0.02")
        self.tokens.declare("drop", (E,), "normal:0.02")

    def modules(self) -> list[Module]:
        return [self.encoder, self.combiner, self.predictor, self.tokens]

    def init(self, rng: np.random.Generator) -> ParamTree:
        """Student parameter tree (all trainable)."""
        tree = ParamTree()
        for mod in self.modules():
            for k, v in mod.init(rng).items():
                tree.add(k, v)
        return tree

    def check_tree(self, params: Mapping[str, Tensor], prefixes=None) -> None:
        expected = {
            name: shape
            for mod in self.modules()
            for name, shape, _ in mod.param_specs()
            if prefixes is None or name.split("/", 1)[0] in prefixes
        }
        got = {k: tuple(v.shape) for k, v in params.items() if prefixes is None or k.split("/", 1)[0] in prefixes}
        if expected != got:
            missing = sorted(set(expected) - set(got))[:3]
            extra = sorted(set(got) - set(expected))[:3]
            wrong = sorted(k for k in set(expected) & set(got) if expected[k] != got[k])[:3]
            raise ParamTreeError(f"parameter tree mismatch: missing {missing}, unexpected {extra}, wrong shape {wrong}")

    @staticmethod
    def teacher_from(student: ParamTree) -> ParamTree:
        """Frozen copy of the backbone (encoder and combiner) of a student tree."""
        return student.subtree(*BACKBONE).frozen()

    def encode(self, params, tile: TileSample, ds: ValidatedDataset, P: float, kept_timestamps=None) -> EmbeddingMap:
        return self.encoder.encode_tile(params, tile, ds, P, kept_timestamps)

    def combine_full(self, params, em: EmbeddingMap, want_tile_embedding: bool = False) -> MultimodalEmbeddings:
        return self.combiner(
            params, tokens_from_map(em), attach_context(em), em.per_axis, em.P, want_tile_embedding
        )

    def backbone(self, params, tile: TileSample, ds: ValidatedDataset, P: float, want_tile_embedding: bool = False):
        """Unmasked encode + combine; returns the embedding map and the multimodal embeddings."""
        em = self.encode(params, tile, ds, P)
        return em, self.combine_full(params, em, want_tile_embedding)
