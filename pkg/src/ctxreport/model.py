"""Learnable parameter set and the encoded-input plumbing shared by training and decoding."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .autodiff import LstmCellParams, Tensor, glorot_uniform
from .encoder import BASELINES, FUSIONS, embed_image, encode_context_batch, fuse_baseline_batch
from .text import NUM_RESERVED, PAD, Vocabulary, encode, normalize

DECODER_MODES = ("causal", "bi-prefix")


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int
    vocab_size: int
    keyword_vocab_size: int
    embed_dim: int = 300
    hidden_dim: int = 256
    fusion: str = "lstm-context"
    decoder_mode: str = "causal"
    dropout: float = 0.5

    def __post_init__(self):
        if self.fusion not in FUSIONS:
            raise ValueError(f"unknown fusion strategy {self.fusion!r}; choose from {FUSIONS}")
        if self.decoder_mode not in DECODER_MODES:
            raise ValueError(f"unknown decoder mode {self.decoder_mode!r}; choose from {DECODER_MODES}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.vocab_size < NUM_RESERVED:
            raise ValueError("vocabulary must hold at least the reserved tokens")

    @property
    def context_dim(self) -> int:
        if self.fusion == "lstm-context":
            return self.hidden_dim
        if self.fusion in BASELINES:
            return self.embed_dim
        return 0

    @property
    def decoder_input_dim(self) -> int:
        return 2 * self.embed_dim + self.context_dim

    @property
    def uses_keywords(self) -> bool:
        return self.fusion != "none"

    def to_dict(self) -> dict:
        return asdict(self)


class ModelParams:
    """All learnable tensors, addressable by stable names.

    ``W_d`` (E x F) projects image features and is shared by the context
    encoder and the per-step decoder input; ``W_k`` (E x V_k) and ``W_e``
    (E x V) embed keyword and report tokens as columns.
    """

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self._tensors = tensors
        for name, t in tensors.items():
            t.name = name
        expected = param_shapes(config)
        if list(expected) != list(tensors):
            raise ValueError(f"parameter names {list(tensors)} do not match {list(expected)}")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ValueError(f"{name}: shape {tensors[name].shape} != expected {shape}")

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "ModelParams":
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in param_shapes(config).items():
            if name.endswith(".b"):
                b = np.zeros(shape)
                H = shape[0] // 4
                b[H:2 * H] = 1.0  # forget gate
                data = b
            elif name == "b_out":
                data = np.zeros(shape)
            else:
                data = glorot_uniform(rng, shape)
            tensors[name] = Tensor(data, requires_grad=True)
        return cls(config, tensors)

    def named(self) -> list[tuple[str, Tensor]]:
        return list(self._tensors.items())

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def _cell(self, prefix: str) -> LstmCellParams | None:
        if prefix + ".w_ih" not in self._tensors:
            return None
        return LstmCellParams(self[prefix + ".w_ih"], self[prefix + ".w_hh"], self[prefix + ".b"])

    @property
    def enc(self) -> LstmCellParams | None:
        return self._cell("enc")

    @property
    def dec(self) -> LstmCellParams:
        return self._cell("dec")

    @property
    def dec_bwd(self) -> LstmCellParams | None:
        return self._cell("dec_bwd")

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {n: Tensor(t.data.copy(), requires_grad=True) for n, t in self.named()})


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    E, H, F = cfg.embed_dim, cfg.hidden_dim, cfg.feature_dim
    shapes: dict[str, tuple[int, ...]] = {"W_d": (E, F)}
    if cfg.uses_keywords:
        shapes["W_k"] = (E, cfg.keyword_vocab_size)
    if cfg.fusion == "lstm-context":
        shapes.update({"enc.w_ih": (4 * H, E), "enc.w_hh": (4 * H, H), "enc.b": (4 * H,)})
    shapes["W_e"] = (E, cfg.vocab_size)
    D = cfg.decoder_input_dim
    shapes.update({"dec.w_ih": (4 * H, D), "dec.w_hh": (4 * H, H), "dec.b": (4 * H,)})
    out_in = H
    if cfg.decoder_mode == "bi-prefix":
        shapes.update({"dec_bwd.w_ih": (4 * H, D), "dec_bwd.w_hh": (4 * H, H), "dec_bwd.b": (4 * H,)})
        out_in = 2 * H
    shapes["W_out"] = (cfg.vocab_size, out_in)
    shapes["b_out"] = (cfg.vocab_size,)
    return shapes


# ---------------------------------------------------------------------------
# encoded inputs
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    features: np.ndarray  # (B, F)
    keywords: list[list[int]]
    tokens: np.ndarray  # (B, L) START ... END PAD..., trimmed to the longest row

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class EncodedDataset:
    """Samples mapped to ids once, sliced into batches on demand."""

    features: np.ndarray
    keywords: list[list[int]]
    tokens: np.ndarray
    ids: list[str]

    def __len__(self) -> int:
        return self.features.shape[0]

    def batch(self, index: Sequence[int] | np.ndarray) -> Batch:
        index = np.asarray(index, dtype=np.int64)
        toks = self.tokens[index]
        used = int((toks != PAD).sum(axis=1).max())
        return Batch(self.features[index], [self.keywords[i] for i in index], toks[:, :used])


def keyword_tokens(keywords: Sequence[str]) -> list[str]:
    """Each keyword phrase contributes its normalised tokens in order."""
    out: list[str] = []
    for kw in keywords:
        out.extend(normalize(kw))
    return out


def encode_samples(samples, vocab: Vocabulary, keyword_vocab: Vocabulary | None, max_len: int) -> EncodedDataset:
    feats = np.array([s.features for s in samples], dtype=np.float64)
    kws = [keyword_vocab.ids(keyword_tokens(s.keywords)) if keyword_vocab else [] for s in samples]
    toks = np.array([encode(normalize(s.report), vocab, max_len) for s in samples], dtype=np.int64)
    return EncodedDataset(feats, kws, toks, [s.id for s in samples])


def encode_inputs(params: ModelParams, features: np.ndarray, keywords: Sequence[Sequence[int]]):
    """Per-row image embedding and fused context vector (None without keywords)."""
    cfg = params.config
    e = embed_image(Tensor(np.atleast_2d(features)), params["W_d"])
    if cfg.fusion == "none":
        return e, None
    if cfg.fusion == "lstm-context":
        return e, encode_context_batch(e, keywords, params["W_k"], params.enc)
    return e, fuse_baseline_batch(cfg.fusion, e, keywords, params["W_k"])
