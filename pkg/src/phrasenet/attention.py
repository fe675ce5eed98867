"""Content-based attention over tagged source annotations."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def attention_keys(params: Mapping[str, Tensor], h_tagged) -> Tensor:
    """Source-side half of the scorer; fixed until the tags change."""
    return ad.linear(h_tagged, params["att.W_h"])


def attend(
    params: Mapping[str, Tensor],
    s_prev,
    h_tagged,
    e_prev,
    source_mask: np.ndarray | None = None,
    keys: Tensor | None = None,
) -> tuple[Tensor, Tensor]:
    """Score every source position with a one-hidden-layer tanh network.

    The scorer input is (s_prev, h'_j, e_prev); masked positions get zero
    weight. Returns the context vector and the attention weights.
    """
    h_tagged = ad.as_tensor(h_tagged)
    log_mask = None
    if source_mask is not None:
        source_mask = np.asarray(source_mask, dtype=np.float64)
        if not source_mask.any(axis=-1).all():
            raise ValueError("attend: every source position is masked")
        if not source_mask.all():
            with np.errstate(divide="ignore"):
                log_mask = np.log(source_mask)
    if keys is None:
        keys = attention_keys(params, h_tagged)
    query = ad.affine([s_prev, e_prev], [params["att.W_s"], params["att.W_e"]], params["att.b"])
    return ad.additive_attention(query, keys, params["att.v"], h_tagged, log_mask)
