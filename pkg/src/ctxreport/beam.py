"""Greedy and beam-search report generation.

Scores are summed log-probabilities under the full softmax.  PAD, START and
UNK are never emitted; at the last position allowed by ``max_len`` only END
is, so every result is a complete ``START ... END`` sequence no longer than
``max_len``.  Ties are broken by the token ids, lexicographically.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import ContractError, Tensor, gather_columns, log_softmax
from .decoder import DecoderState, decode_step, initial_state
from .model import ModelParams, encode_inputs
from .text import END, PAD, START, UNK

BANNED = (PAD, START, UNK)


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    log_prob: float
    finished: bool = False

    @property
    def length(self) -> int:
        """Generated tokens, END included."""
        return len(self.tokens) - 1

    def padded(self, max_len: int) -> list[int]:
        return list(self.tokens) + [PAD] * (max_len - len(self.tokens))


class _Stepper:
    """Runs the decoder for a set of rows that share one image and keyword list."""

    def __init__(self, params: ModelParams, features, keyword_ids: Sequence[int]):
        self.params = params
        feats = np.asarray(features, dtype=np.float64)[None, :]
        kws = [list(keyword_ids)] if params.config.uses_keywords else [[]]
        e, k = encode_inputs(params, feats, kws)
        self.e = e.data
        self.k = None if k is None else k.data

    def __call__(self, state: DecoderState, last_tokens: np.ndarray) -> tuple[np.ndarray, DecoderState]:
        n = len(last_tokens)
        e = Tensor(np.repeat(self.e, n, axis=0))
        k = None if self.k is None else Tensor(np.repeat(self.k, n, axis=0))
        x = gather_columns(self.params["W_e"], last_tokens)
        logits, new_state = decode_step(state, e, k, x, self.params)
        return log_softmax(logits.data), new_state


def _select_rows(state: DecoderState, rows) -> DecoderState:
    rows = np.asarray(rows, dtype=np.int64)
    return DecoderState(
        Tensor(state.h.data[rows]),
        Tensor(state.c.data[rows]),
        tuple(Tensor(p.data[rows]) for p in state.prefix),
    )


def _allowed_mask(vocab_size: int, banned: Sequence[int], end_only: bool) -> np.ndarray:
    allowed = np.zeros(vocab_size, dtype=bool)
    if end_only:
        allowed[END] = True
    else:
        allowed[:] = True
        allowed[list(banned)] = False
    return allowed


def greedy_decode(params: ModelParams, features, keyword_ids: Sequence[int], max_len: int = 50,
                  banned: Sequence[int] = BANNED) -> Hypothesis:
    """Arg-max token at every step (lowest id on ties) until END or ``max_len``."""
    if max_len < 2:
        raise ContractError("max_len must leave room for START and END")
    step = _Stepper(params, features, keyword_ids)
    V = params.config.vocab_size
    state = initial_state(params, 1)
    tokens = [START]
    score = 0.0
    while True:
        logp, state = step(state, np.array([tokens[-1]]))
        allowed = _allowed_mask(V, banned, end_only=len(tokens) == max_len - 1)
        row = np.where(allowed, logp[0], -np.inf)
        tok = int(np.argmax(row))
        tokens.append(tok)
        score += float(logp[0, tok])
        if tok == END:
            return Hypothesis(tuple(tokens), score, True)


def _rank_key(h: Hypothesis, length_norm: bool):
    s = h.log_prob / h.length if length_norm else h.log_prob
    return (-s, h.tokens)


def beam_decode(params: ModelParams, features, keyword_ids: Sequence[int], k: int = 3, max_len: int = 50,
                length_norm: bool = False, banned: Sequence[int] = BANNED) -> list[Hypothesis]:
    """Up to ``k`` finished hypotheses, best first.

    Each step expands every live hypothesis over the whole vocabulary and
    walks the candidates best-first: those ending in END retire to the
    completed pool, the rest refill the live beam until it holds ``k``.
    Search stops once the pool's k-th best score is at least the best live
    score (live scores can only fall), when nothing is live, or at
    ``max_len``.
    """
    if k < 1:
        raise ContractError(f"beam width must be at least 1, got {k}")
    if max_len < 2:
        raise ContractError("max_len must leave room for START and END")
    step = _Stepper(params, features, keyword_ids)
    V = params.config.vocab_size
    live = [Hypothesis((START,), 0.0)]
    state = initial_state(params, 1)
    pool: list[Hypothesis] = []

    for pos in range(1, max_len):
        logp, new_state = step(state, np.array([h.tokens[-1] for h in live]))
        allowed = _allowed_mask(V, banned, end_only=pos == max_len - 1)
        scores = np.array([h.log_prob for h in live])[:, None] + np.where(allowed, logp, -np.inf)
        flat = scores.ravel()
        finite = int(np.isfinite(flat).sum())
        need = min(2 * k, finite)
        if need == 0:
            break
        # everything tied with the need-th best, so the tie-break sees the full set
        cutoff = np.partition(flat, flat.size - need)[flat.size - need]
        picked = np.flatnonzero(flat >= cutoff)
        cands = []
        for j in picked:
            row, tok = divmod(int(j), V)
            # the tie-break uses the parent's tokens, then the new token
            cands.append((-float(flat[j]), live[row].tokens + (tok,), row, float(logp[row, tok])))
        cands.sort(key=lambda c: (c[0], c[1]))

        next_live, rows = [], []
        for neg, toks, row, lp in cands:
            score = live[row].log_prob + lp
            if toks[-1] == END:
                pool.append(Hypothesis(toks, score, True))
            else:
                next_live.append(Hypothesis(toks, score))
                rows.append(row)
                if len(next_live) == k:
                    break
        if not next_live:
            break
        live = next_live
        state = _select_rows(new_state, rows)
        if not length_norm and len(pool) >= k:
            kth = sorted(h.log_prob for h in pool)[-k]
            if kth >= max(h.log_prob for h in live):
                break

    pool.sort(key=lambda h: _rank_key(h, length_norm))
    return pool[:k]
