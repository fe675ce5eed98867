"""Bidirectional GRU encoder with phrase-tag augmentation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor


def gru_cell(params: Mapping[str, Tensor], prefix: str, x, s_prev, x_proj=None) -> Tensor:
    """One GRU update with update/reset/candidate gates.

    z = sigmoid(W_z x + U_z s + b_z), r = sigmoid(W_r x + U_r s + b_r),
    c = tanh(W_c x + U_c (r*s) + b_c), s' = (1 - z) * s + z * c.

    ``x_proj`` may carry a precomputed ``W x + b`` to skip the input product.
    """
    W, U_zr, U_c = params[f"{prefix}.W"], params[f"{prefix}.U_zr"], params[f"{prefix}.U_c"]
    h = U_c.shape[0]
    s_prev = ad.as_tensor(s_prev)
    if s_prev.shape[-1] != h:
        raise DimensionError(f"gru_cell: state width {s_prev.shape[-1]} != hidden size {h}")
    if x_proj is None:
        x = ad.as_tensor(x)
        if x.shape[-1] != W.shape[1]:
            raise DimensionError(f"gru_cell: input width {x.shape[-1]} != {W.shape[1]}")
        x_proj = ad.affine([x], [W], params[f"{prefix}.b"])
    return ad.gru(x_proj, s_prev, U_zr, U_c)


def run_gru(
    params: Mapping[str, Tensor],
    prefix: str,
    inputs: Tensor,
    mask: np.ndarray | None = None,
    reverse: bool = False,
) -> list[Tensor]:
    """Run a GRU over ``inputs`` (..., T, d_in) from a zero state.

    Masked positions leave the state unchanged. Returns per-position states
    in source order regardless of direction.
    """
    h = params[f"{prefix}.U_c"].shape[0]
    T = inputs.shape[-2]
    proj = ad.affine([inputs], [params[f"{prefix}.W"]], params[f"{prefix}.b"])
    s = Tensor(np.zeros(inputs.shape[:-2] + (h,)))
    states: list[Tensor | None] = [None] * T
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for t in steps:
        s_new = gru_cell(params, prefix, None, s, x_proj=proj[..., t, :])
        if mask is not None and not mask[..., t].all():
            m = mask[..., t, None]
            s_new = s_new * m + s * (1.0 - m)
        s = s_new
        states[t] = s
    return states


@dataclass
class EncodedSource:
    h: Tensor  # (..., T, 2*d_h)
    tags: np.ndarray  # (..., T, n_p); the only mutable part
    mask: np.ndarray  # (..., T)
    backward_first: Tensor  # backward-RNN state at position 0

    def h_tagged(self) -> Tensor:
        return ad.concat([self.h, Tensor(self.tags)], axis=-1)

    def zero_tags(self, begin: int, end: int) -> None:
        self.tags[..., begin:end, :] = 0.0


def embed(table: Tensor, ids) -> Tensor:
    return table[np.asarray(ids, dtype=np.int64)]


def encode(
    params: Mapping[str, Tensor],
    source_ids,
    tag_matrix: np.ndarray,
    source_mask: np.ndarray | None = None,
) -> EncodedSource:
    """Encode source ids (T,) or (B, T) and attach tag vectors."""
    ids = np.asarray(source_ids, dtype=np.int64)
    if ids.shape[-1] == 0:
        raise ValueError("cannot encode an empty sentence")
    tags = np.array(tag_matrix, dtype=np.float64)
    if tags.shape[:-1] != ids.shape:
        raise DimensionError(f"tag matrix {tags.shape} does not match source {ids.shape}")
    mask = np.ones(ids.shape) if source_mask is None else np.asarray(source_mask, dtype=np.float64)
    x = embed(params["src_emb"], ids)
    fwd = run_gru(params, "enc_f", x, mask)
    bwd = run_gru(params, "enc_b", x, mask, reverse=True)
    h = ad.concat([ad.stack(fwd, axis=-2), ad.stack(bwd, axis=-2)], axis=-1)
    return EncodedSource(h=h, tags=tags, mask=mask, backward_first=bwd[0])
