"""Fill channels a sensor does not provide with one learned scalar."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..numerics import Tensor, as_tensor, custom_op


class ChannelPadError(ValueError):
    pass


def pad_channels(x, C_expected: int, pad_value: Tensor, present: Sequence[bool] | None = None) -> Tensor:
    """Expand ``x (..., C_in)`` to ``(..., C_expected)``.

    ``present`` marks which expected channels ``x`` carries, in order; by
    default the first ``C_in`` are present. Present channels are copied
    unchanged, missing ones all take ``pad_value`` (a scalar parameter).
    """
    x = as_tensor(x)
    c_in = x.shape[-1]
    if c_in > C_expected:
        raise ChannelPadError(f"input has {c_in} channels, more than the expected {C_expected}")
    if present is None:
        present = [True] * c_in + [False] * (C_expected - c_in)
    present = np.asarray(present, dtype=bool)
    if present.shape != (C_expected,) or present.sum() != c_in:
        raise ChannelPadError(f"presence mask {present.tolist()} does not match {c_in} input channels")
    if c_in == C_expected:
        return x
    idx_present = np.flatnonzero(present)
    idx_missing = np.flatnonzero(~present)
    out = np.empty(x.shape[:-1] + (C_expected,))
    out[..., idx_present] = x.data
    out[..., idx_missing] = float(pad_value.data.reshape(()))

    def bw(g):
        gx = g[..., idx_present] if x.requires_grad else None
        gp = np.asarray(g[..., idx_missing].sum()).reshape(pad_value.shape)
        return gx, gp

    return custom_op(out, (x, pad_value), bw, "pad_channels")
