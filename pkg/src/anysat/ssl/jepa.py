"""Student and teacher forward passes, per-tile losses and the EMA update."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .. import numerics as nx
from ..combiner import MultimodalEmbeddings, TokenSet, attach_context
from ..data.specs import ValidatedDataset
from ..data.tilefile import TileSample
from ..encoder import EmbeddingMap
from ..model import AnySat
from ..nn import ParamTree, ParamTreeError
from ..numerics import Tensor
from .losses import contrastive_loss, jepa_loss
from .masking import MaskPlan


@dataclass
class StudentOutput:
    embeddings: EmbeddingMap
    unimodal: Tensor  # (n_patches, n_patch_modalities, E)
    combined: MultimodalEmbeddings  # kept patches only
    predictions: Tensor  # (n_patches, E)


def masked_tokens(params, em: EmbeddingMap, plan: MaskPlan, modalities) -> TokenSet:
    """Tokens of surviving patches, with masked (patch, modality) pairs replaced by the mask token."""
    kept = np.asarray(plan.kept, dtype=np.int64)
    ids, names, vecs = [], [], []
    for m in modalities:
        v = em.unimodal[m][kept]
        w = np.array([[(p, m) in plan.masked] for p in kept.tolist()], dtype=np.float64)
        if w.any():
            v = v * (1.0 - w) + params["tokens/mask"] * w
        ids.append(kept)
        names.extend([m] * len(kept))
        vecs.append(v)
    return TokenSet(np.concatenate(ids), names, nx.concat(vecs, axis=0))


def student_forward(model: AnySat, params, tile: TileSample, ds: ValidatedDataset, P: float, plan: MaskPlan) -> StudentOutput:
    mods = ds.patch_modalities()
    em = model.encode(params, tile, ds, P, plan.kept_timestamps)
    if em.per_axis != plan.per_axis:
        raise ValueError(f"mask plan grid {plan.per_axis} does not match patch grid {em.per_axis}")
    unimodal = nx.stack([em.unimodal[m] for m in mods], axis=1)

    combined = model.combiner(params, masked_tokens(params, em, plan, mods), attach_context(em), em.per_axis, P)
    dropped = np.asarray(plan.dropped, dtype=np.int64)
    E = model.cfg.E
    drop_rows = nx.broadcast_to(params["tokens/drop"].reshape(1, E), (len(dropped), E))
    order = np.concatenate([combined.patch_ids, dropped])
    full = nx.concat([combined.per_patch, drop_rows], axis=0)[np.argsort(order)]
    pred = model.predictor(params, full, em.per_axis, P)
    return StudentOutput(em, unimodal, combined, pred)


def teacher_forward(model: AnySat, teacher, tile: TileSample, ds: ValidatedDataset, P: float) -> MultimodalEmbeddings:
    """Full-input encode + combine with the teacher's parameters; never records gradients."""
    with nx.no_grad():
        _, out = model.backbone(teacher, tile, ds, P)
    return out


@dataclass
class TileLoss:
    total: Tensor
    l_jepa: float
    l_con: float | None
    n_dropped: int
    n_masked: int


def tile_loss(
    model: AnySat,
    student,
    teacher,
    tile: TileSample,
    ds: ValidatedDataset,
    P: float,
    plan: MaskPlan,
    tau: float = 0.1,
    lambda_con: float = 1.0,
) -> TileLoss:
    out = student_forward(model, student, tile, ds, P, plan)
    target = teacher_forward(model, teacher, tile, ds, P).per_patch
    lj = jepa_loss(out.predictions, target, plan.dropped)
    total = lj
    lc = contrastive_loss(out.unimodal, tau) if lambda_con > 0 else None
    if lc is not None:
        total = total + lc * lambda_con
    return TileLoss(total, lj.item(), None if lc is None else lc.item(), len(plan.dropped), len(plan.masked))


def ema_update(teacher: ParamTree, student: Mapping[str, Tensor], m: float) -> None:
    """theta_T <- m * theta_T + (1 - m) * theta_S for every teacher parameter, in place."""
    if not 0 < m <= 1:
        raise ValueError(f"EMA decay must lie in (0, 1], got {m}")
    for k, t in teacher.items():
        if k not in student:
            raise ParamTreeError(f"teacher parameter {k!r} has no student counterpart")
        s = student[k].data
        if s.shape != t.shape:
            raise ParamTreeError(f"{k}: teacher shape {t.shape} != student shape {s.shape}")
        t.data = m * t.data + (1.0 - m) * s
