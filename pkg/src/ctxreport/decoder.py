"""Fused-feature decoder: per-step distributions, teacher-forced loss and training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tape,
    Tensor,
    add,
    concat,
    dropout,
    gather_columns,
    linear,
    lstm_step,
    scale,
    sgd_step,
    softmax_nll,
)
from .model import Batch, EncodedDataset, ModelParams, encode_inputs
from .text import PAD

log = logging.getLogger(__name__)


@dataclass
class DecoderState:
    h: Tensor
    c: Tensor
    # bi-prefix mode only: dropout-applied step inputs seen so far
    prefix: tuple[Tensor, ...] = ()


def initial_state(params: ModelParams, batch_size: int | None = None) -> DecoderState:
    H = params.config.hidden_dim
    shape = (H,) if batch_size is None else (batch_size, H)
    return DecoderState(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))


def decode_step(
    state: DecoderState,
    e_t: Tensor,
    k_final: Tensor | None,
    x_t: Tensor,
    params: ModelParams,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, DecoderState]:
    """Logits for the next token given image, context and current-word embeddings.

    Dropout (training only) is applied to the concatenated input and to the
    hidden state feeding the output projection.
    """
    cfg = params.config
    parts = [e_t, x_t] if k_final is None else [e_t, k_final, x_t]
    u = dropout(concat(parts), cfg.dropout, rng, training)
    h, c = lstm_step(u, state.h, state.c, params.dec)
    prefix = ()
    top = h
    if cfg.decoder_mode == "bi-prefix":
        # backward cell re-reads the whole prefix, newest input first
        prefix = state.prefix + (u,)
        hb = Tensor(np.zeros(h.shape))
        cb = Tensor(np.zeros(h.shape))
        for v in reversed(prefix):
            hb, cb = lstm_step(v, hb, cb, params.dec_bwd)
        top = concat([h, hb])
    top = dropout(top, cfg.dropout, rng, training)
    logits = linear(top, params["W_out"], params["b_out"])
    return logits, DecoderState(h, c, prefix)


def teacher_forced_loss(
    params: ModelParams,
    batch: Batch,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Summed per-sequence NLL of every non-PAD target, averaged over the batch.

    Inputs are ``tokens[:, :-1]`` and targets ``tokens[:, 1:]``; START is
    never a target and PAD targets are masked out.
    """
    B = len(batch)
    e, k = encode_inputs(params, batch.features, batch.keywords)
    state = initial_state(params, B)
    loss = None
    for t in range(batch.tokens.shape[1] - 1):
        target = batch.tokens[:, t + 1]
        mask = target != PAD
        if not mask.any():
            break
        x_t = gather_columns(params["W_e"], batch.tokens[:, t])
        logits, state = decode_step(state, e, k, x_t, params, training, rng)
        nll = softmax_nll(logits, target, mask)
        loss = nll if loss is None else add(loss, nll)
    if loss is None:
        return Tensor(0.0)
    return scale(loss, 1.0 / B)


def sequence_loss(params: ModelParams, features, keywords, tokens) -> float:
    """Eval-mode summed NLL of one encoded sequence."""
    toks = np.asarray(tokens, dtype=np.int64)[None, :]
    batch = Batch(np.atleast_2d(np.asarray(features, dtype=np.float64)), [list(keywords)], toks)
    return float(teacher_forced_loss(params, batch).data)


def dataset_loss(params: ModelParams, data: EncodedDataset, batch_size: int = 256) -> float:
    """Mean eval-mode per-sequence loss over ``data``."""
    total = 0.0
    for lo in range(0, len(data), batch_size):
        idx = np.arange(lo, min(lo + batch_size, len(data)))
        total += float(teacher_forced_loss(params, data.batch(idx)).data) * len(idx)
    return total / len(data)


def uniform_loss(data: EncodedDataset, vocab_size: int) -> float:
    """Mean ``T * ln V`` for a model that spreads mass evenly over the vocabulary."""
    targets = (data.tokens[:, 1:] != PAD).sum(axis=1)
    return float(targets.mean()) * math.log(vocab_size)


@dataclass
class TrainConfig:
    lr: float = 0.001
    epochs: int = 2
    batch_size: int = 64


@dataclass
class TrainTrace:
    initial_loss: float
    uniform_loss: float
    epoch_loss: list[float] = field(default_factory=list)
    batch_loss: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "initial_loss": self.initial_loss,
            "uniform_loss": self.uniform_loss,
            "epoch_loss": self.epoch_loss,
            "batch_loss": self.batch_loss,
        }


def train(params: ModelParams, data: EncodedDataset, hyper: TrainConfig, seed: int) -> TrainTrace:
    """Minibatch SGD over a seeded shuffle of ``data``; updates ``params`` in place."""
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    shuffle_seq, dropout_seq = np.random.SeedSequence(seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    dropout_rng = np.random.default_rng(dropout_seq)
    tensors = params.tensors()
    for p in tensors:
        p.zero_grad()

    trace = TrainTrace(dataset_loss(params, data), uniform_loss(data, params.config.vocab_size))
    log.info("initial loss %.4f (uniform %.4f)", trace.initial_loss, trace.uniform_loss)
    for epoch in range(hyper.epochs):
        order = shuffle_rng.permutation(len(data))
        losses = []
        for lo in range(0, len(order), hyper.batch_size):
            batch = data.batch(order[lo:lo + hyper.batch_size])
            with Tape() as tape:
                loss = teacher_forced_loss(params, batch, training=True, rng=dropout_rng)
            tape.backward(loss)
            sgd_step(tensors, hyper.lr)
            losses.append(float(loss.data))
        trace.batch_loss.extend(losses)
        trace.epoch_loss.append(float(np.mean(losses)))
        log.info("epoch %d mean loss %.4f", epoch + 1, trace.epoch_loss[-1])
    return trace
