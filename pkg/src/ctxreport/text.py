"""Tokenisation, vocabulary construction and fixed-length sequence encoding."""

from __future__ import annotations

import re
from collections import Counter
from pathlib import Path
from typing import Iterable, Sequence

PAD, START, END, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<start>", "<end>", "<unk>")
NUM_RESERVED = len(RESERVED)

_NON_ALPHA = re.compile(r"[^A-Za-z]+")


def normalize(text: str) -> list[str]:
    """Lowercase word tokens; every non-letter (digits included) acts as a separator.

    >>> normalize("Diffuse, UNILATERAL!")
    ['diffuse', 'unilateral']
    """
    return _NON_ALPHA.sub(" ", text).lower().split()


class Vocabulary:
    """Bidirectional token <-> id map with ids 0-3 reserved for PAD/START/END/UNK."""

    def __init__(self, tokens: Sequence[str]):
        self.itos: list[str] = list(RESERVED) + list(tokens)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("vocabulary tokens must be unique and must not reuse reserved names")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def ids(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def token(self, idx: int) -> str:
        if not 0 <= idx < len(self.itos):
            raise IndexError(f"id {idx} outside vocabulary of size {len(self.itos)}")
        return self.itos[idx]

    @property
    def corpus_tokens(self) -> list[str]:
        return self.itos[NUM_RESERVED:]

    def save(self, path: str | Path) -> None:
        """One token per line; the first four lines hold the reserved tokens."""
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[:NUM_RESERVED]) != RESERVED:
            raise ValueError(f"{path}: missing reserved-token header {RESERVED}")
        return cls(lines[NUM_RESERVED:])


def build_vocab(
    corpora: Iterable[Sequence[str]],
    keywords: Iterable[Sequence[str]] | None = None,
    include_keywords: bool = False,
    min_count: int = 2,
) -> Vocabulary:
    """Keep tokens seen at least ``min_count`` times; rarer ones fall back to UNK.

    Ids are assigned by descending frequency, ties broken lexicographically,
    so the result does not depend on corpus order.  With ``include_keywords``
    the keyword token lists are counted alongside the report corpus.
    """
    counts: Counter[str] = Counter()
    for toks in corpora:
        counts.update(toks)
    if include_keywords and keywords is not None:
        for toks in keywords:
            counts.update(toks)
    for name in RESERVED:
        counts.pop(name, None)
    kept = sorted((t for t, n in counts.items() if n >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


def encode(tokens: Sequence[str], vocab: Vocabulary, max_len: int) -> list[int]:
    """``[START] + ids + [END]`` truncated to ``max_len`` then PAD-filled to it."""
    if max_len < 3:
        raise ValueError(f"max_len must be at least 3, got {max_len}")
    body = vocab.ids(tokens)[: max_len - 2]
    seq = [START, *body, END]
    return seq + [PAD] * (max_len - len(seq))


def decode(seq: Sequence[int], vocab: Vocabulary) -> str:
    """Join tokens with single spaces, dropping PAD/START/END; UNK shows as ``<unk>``."""
    out = []
    for idx in seq:
        tok = vocab.token(int(idx))
        if idx in (PAD, START):
            continue
        if idx == END:
            break
        out.append(tok)
    return " ".join(out)


def is_valid_sequence(seq: Sequence[int], max_len: int) -> bool:
    """START first, exactly one END within ``max_len``, PAD only after END."""
    if len(seq) > max_len or not seq or seq[0] != START:
        return False
    if list(seq).count(END) != 1:
        return False
    end = list(seq).index(END)
    return all(t == PAD for t in seq[end + 1:]) and PAD not in seq[:end] and START not in seq[1:]
