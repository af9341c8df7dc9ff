"""Cross-modal contrastive loss and the JEPA prediction loss."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .. import numerics as nx
from ..numerics import Tensor


class LossInputError(ValueError):
    pass


def contrastive_pair_masks(n_patches: int, n_mods: int) -> tuple[np.ndarray, np.ndarray]:
    """Positive and negative masks over rows ordered (patch, modality).

    Positives: same patch, other modality. Negatives: other patch, other modality.
    Same-modality pairs are never used.
    """
    p = np.repeat(np.arange(n_patches), n_mods)
    m = np.tile(np.arange(n_mods), n_patches)
    other_mod = m[:, None] != m[None, :]
    same_patch = p[:, None] == p[None, :]
    return (other_mod & same_patch).astype(np.float64), (other_mod & ~same_patch).astype(np.float64)


def contrastive_loss(unimodal: Tensor, tau: float = 0.1) -> Tensor | None:
    """Mean over (p, m) of -log(sum_pos exp(cos/tau) / sum_neg exp(cos/tau)).

    ``unimodal`` has shape (n_patches, n_modalities, E). Returns ``None`` when
    fewer than two patches or two modalities make the loss inapplicable.
    """
    if tau <= 0:
        raise LossInputError(f"temperature must be positive, got {tau}")
    n_p, n_m, E = unimodal.shape
    if n_p < 2 or n_m < 2:
        return None
    z = nx.normalize(unimodal.reshape(n_p * n_m, E), axis=-1)
    sim = nx.matmul(z, z.transpose(1, 0))
    # shifting by the maximum cosine (1) keeps exp bounded; the ratio is unchanged
    e = nx.exp((sim - 1.0) * (1.0 / tau))
    pos, neg = contrastive_pair_masks(n_p, n_m)
    num = nx.sum_(e * pos, axis=1)
    den = nx.sum_(e * neg, axis=1)
    return nx.mean(nx.log(den) - nx.log(num))


def jepa_loss(pred: Tensor, teacher, dropped: Sequence[int]) -> Tensor:
    """(1/|D|) * sum over dropped patches of the squared L2 distance to the teacher.

    ``pred`` and ``teacher`` are indexed by patch; the teacher side is a constant.
    """
    idx = np.asarray(sorted(dropped), dtype=np.int64)
    if idx.size == 0:
        raise LossInputError("JEPA loss needs a nonempty dropped set")
    target = teacher.data if isinstance(teacher, Tensor) else np.asarray(teacher, dtype=np.float64)
    if pred.shape != target.shape:
        raise nx.ShapeMismatchError("jepa_loss", pred.shape, target.shape)
    diff = pred[idx] - target[idx]
    return nx.sum_(diff * diff) * (1.0 / idx.size)
