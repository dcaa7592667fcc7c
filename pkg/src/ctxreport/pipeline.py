"""End-to-end workflows shared by the command line and the acceptance runs."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from . import checkpoint
from .autodiff import ContractError
from .beam import beam_decode, greedy_decode
from .config import RunConfig
from .decoder import TrainConfig, TrainTrace, train
from .metrics import METRIC_KEYS, score_all
from .model import ModelConfig, ModelParams, encode_samples, keyword_tokens
from .synthetic import Sample
from .text import Vocabulary, build_vocab, decode, normalize

log = logging.getLogger(__name__)

REPORT_VOCAB = "vocab.txt"
KEYWORD_VOCAB = "keywords.txt"
CHECKPOINT = "model.ckpt"
TRACE = "trace.json"


@dataclass
class TrainedModel:
    params: ModelParams
    vocab: Vocabulary
    keyword_vocab: Vocabulary | None
    trace: TrainTrace | None = None


def build_vocabularies(train_samples: Sequence[Sample], with_keywords: bool):
    """Report and keyword vocabularies from the training split alone."""
    reports = [normalize(s.report) for s in train_samples]
    vocab = build_vocab(reports)
    if not with_keywords:
        return vocab, None
    kws = [keyword_tokens(s.keywords) for s in train_samples]
    return vocab, build_vocab(reports, kws, include_keywords=True)


def train_model(cfg: RunConfig, train_samples: Sequence[Sample], feature_dim: int | None = None) -> TrainedModel:
    if not train_samples:
        raise ContractError("training split is empty")
    feature_dim = feature_dim or len(train_samples[0].features)
    vocab, kvocab = build_vocabularies(train_samples, cfg.fusion != "none")
    mcfg = ModelConfig(
        feature_dim=feature_dim,
        vocab_size=len(vocab),
        keyword_vocab_size=len(kvocab) if kvocab else 0,
        embed_dim=cfg.embed_dim,
        hidden_dim=cfg.hidden_dim,
        fusion=cfg.fusion,
        decoder_mode=cfg.decoder_mode,
        dropout=cfg.dropout,
    )
    params = ModelParams.init(mcfg, cfg.seed)
    data = encode_samples(train_samples, vocab, kvocab, cfg.max_len)
    trace = train(params, data, TrainConfig(cfg.lr, cfg.epochs, cfg.batch_size), cfg.seed)
    return TrainedModel(params, vocab, kvocab, trace)


def save_model(model: TrainedModel, cfg: RunConfig, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / CHECKPOINT
    model.vocab.save(out_dir / REPORT_VOCAB)
    refs = {"report": checkpoint.vocab_entry(out_dir / REPORT_VOCAB, ckpt_path)}
    if model.keyword_vocab is not None:
        model.keyword_vocab.save(out_dir / KEYWORD_VOCAB)
        refs["keyword"] = checkpoint.vocab_entry(out_dir / KEYWORD_VOCAB, ckpt_path)
    checkpoint.save(checkpoint.Checkpoint(model.params, cfg.echo(), refs), ckpt_path)
    return ckpt_path


def load_model(ckpt_path: str | Path) -> tuple[TrainedModel, dict]:
    ckpt = checkpoint.load(ckpt_path)
    vocab = checkpoint.load_vocab(ckpt, ckpt_path, "report")
    kvocab = checkpoint.load_vocab(ckpt, ckpt_path, "keyword") if ckpt.params.config.uses_keywords else None
    return TrainedModel(ckpt.params, vocab, kvocab), ckpt.run_config


def generate_reports(model: TrainedModel, samples: Sequence[Sample], beam_k: int = 3, max_len: int = 50,
                     greedy: bool = False, length_norm: bool = False) -> list[dict]:
    """One ``{"id", "report", "log_prob"}`` record per sample."""
    data = encode_samples(samples, model.vocab, model.keyword_vocab, max_len)
    out = []
    for i, s in enumerate(samples):
        if greedy:
            hyp = greedy_decode(model.params, data.features[i], data.keywords[i], max_len)
        else:
            hyp = beam_decode(model.params, data.features[i], data.keywords[i], beam_k, max_len, length_norm)[0]
        out.append({"id": s.id, "report": decode(hyp.tokens, model.vocab), "log_prob": hyp.log_prob})
    return out


def evaluate_reports(candidates: Sequence[dict], samples: Sequence[Sample]) -> dict[str, float]:
    """Metrics over the samples' ids; every id must have exactly one candidate."""
    by_id = {}
    for c in candidates:
        if c["id"] in by_id:
            raise ContractError(f"duplicate candidate id {c['id']!r}")
        by_id[c["id"]] = c["report"]
    missing = [s.id for s in samples if s.id not in by_id]
    if not samples or len(missing) == len(samples):
        raise ContractError("no candidate ids match the reference split")
    if missing:
        shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
        raise ContractError(f"{len(missing)} reference id(s) have no candidate: {shown}")
    cands = [normalize(by_id[s.id]) for s in samples]
    refs = [[normalize(s.report)] for s in samples]
    scores = score_all(cands, refs)
    assert tuple(scores) == METRIC_KEYS
    return scores


def run_strategy(cfg: RunConfig, train_samples, test_samples) -> dict:
    """Train one configuration and score it on ``test_samples``."""
    model = train_model(cfg, train_samples)
    cands = generate_reports(model, test_samples, cfg.beam_k, cfg.max_len, length_norm=cfg.length_norm)
    scores = evaluate_reports(cands, test_samples)
    log.info("%s: bleu_avg %.4f", cfg.fusion, scores["bleu_avg"])
    return {"fusion": cfg.fusion, **scores, "final_loss": model.trace.epoch_loss[-1]}


def markdown_table(rows: Sequence[dict]) -> str:
    head = "| fusion | " + " | ".join(METRIC_KEYS) + " |"
    sep = "|---|" + "---|" * len(METRIC_KEYS)
    body = ["| " + r["fusion"] + " | " + " | ".join(f"{r[k]:.4f}" for k in METRIC_KEYS) + " |" for r in rows]
    return "\n".join([head, sep, *body]) + "\n"
