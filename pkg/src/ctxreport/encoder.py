"""Image/keyword context encoding and the baseline fusion operators.

The LSTM context encoder starts from a zero state, consumes the projected
image features first and then one embedded keyword token per step; its last
hidden state is the fused context vector.  The baselines combine the image
embedding and the keyword embeddings with an order-free reduction.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import (
    LstmCellParams,
    ShapeError,
    Tensor,
    add,
    blend,
    gather_columns,
    linear,
    lstm_step,
    mul,
)
from .text import PAD

FUSIONS = ("lstm-context", "average", "sum", "mul", "none")
BASELINES = ("average", "sum", "mul")


def embed_image(features: Tensor, w_d: Tensor) -> Tensor:
    """Project image features (F,) or (B, F) into the E-dim embedding space."""
    if features.shape[-1] != w_d.shape[1]:
        raise ShapeError(f"image features of width {features.shape[-1]} do not match W_d {w_d.shape}")
    return linear(features, w_d)


def _check_keywords(keyword_ids: Sequence[int], vocab_size: int) -> None:
    for k in keyword_ids:
        if k == PAD:
            raise ValueError("keyword lists are consumed unpadded; PAD id found")
        if not 0 <= k < vocab_size:
            raise IndexError(f"keyword id {k} outside keyword vocabulary of size {vocab_size}")


def encode_context(image_emb: Tensor, keyword_ids: Sequence[int], w_k: Tensor, cell: LstmCellParams) -> Tensor:
    """Hidden state after the image step followed by one step per keyword token."""
    _check_keywords(keyword_ids, w_k.shape[1])
    H = cell.hidden_size
    h = Tensor(np.zeros(H))
    c = Tensor(np.zeros(H))
    h, c = lstm_step(image_emb, h, c, cell)
    for k in keyword_ids:
        h, c = lstm_step(gather_columns(w_k, int(k)), h, c, cell)
    return h


def encode_context_batch(
    image_emb: Tensor, keyword_ids: Sequence[Sequence[int]], w_k: Tensor, cell: LstmCellParams
) -> Tensor:
    """Row-batched :func:`encode_context` for keyword lists of unequal length.

    Rows whose list is exhausted keep their state unchanged, so each row
    equals the unpadded single-sample computation.
    """
    B = image_emb.shape[0]
    if len(keyword_ids) != B:
        raise ShapeError(f"{len(keyword_ids)} keyword lists for a batch of {B}")
    for ids in keyword_ids:
        _check_keywords(ids, w_k.shape[1])
    H = cell.hidden_size
    h = Tensor(np.zeros((B, H)))
    c = Tensor(np.zeros((B, H)))
    h, c = lstm_step(image_emb, h, c, cell)
    lengths = np.array([len(ids) for ids in keyword_ids])
    for n in range(int(lengths.max(initial=0))):
        active = lengths > n
        step_ids = [ids[n] if len(ids) > n else PAD for ids in keyword_ids]
        h_new, c_new = lstm_step(gather_columns(w_k, step_ids), h, c, cell)
        h = blend(active, h_new, h)
        c = blend(active, c_new, c)
    return h


def fuse_baseline(strategy: str, image_emb: Tensor, keyword_embs: Sequence[Tensor]) -> Tensor:
    """Elementwise mean, sum or product over ``{image_emb} + keyword_embs``."""
    if strategy not in BASELINES:
        raise ValueError(f"not a baseline fusion strategy: {strategy!r}")
    out = image_emb
    op = mul if strategy == "mul" else add
    for k in keyword_embs:
        out = op(out, k)
    if strategy == "average":
        out = mul(out, Tensor(np.full(out.shape, 1.0 / (1 + len(keyword_embs)))))
    return out


def fuse_baseline_batch(
    strategy: str, image_emb: Tensor, keyword_ids: Sequence[Sequence[int]], w_k: Tensor
) -> Tensor:
    """Row-batched :func:`fuse_baseline` with keyword embeddings looked up from ``w_k``."""
    if strategy not in BASELINES:
        raise ValueError(f"not a baseline fusion strategy: {strategy!r}")
    B, E = image_emb.shape
    for ids in keyword_ids:
        _check_keywords(ids, w_k.shape[1])
    lengths = np.array([len(ids) for ids in keyword_ids])
    # masked rows receive the operator's identity element
    neutral = Tensor(np.ones((B, E)) if strategy == "mul" else np.zeros((B, E)))
    op = mul if strategy == "mul" else add
    out = image_emb
    for n in range(int(lengths.max(initial=0))):
        active = lengths > n
        step_ids = [ids[n] if len(ids) > n else PAD for ids in keyword_ids]
        out = op(out, blend(active, gather_columns(w_k, step_ids), neutral))
    if strategy == "average":
        out = mul(out, Tensor(np.repeat(1.0 / (1 + lengths)[:, None], E, axis=1)))
    return out
