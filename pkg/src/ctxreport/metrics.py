"""Corpus-level BLEU-1..4, ROUGE-L and CIDEr over tokenised captions.

Conventions (pinned so scores are reproducible):

* BLEU: clipped n-gram counts are summed over the corpus before the
  precision is taken; the brevity penalty uses, per candidate, the closest
  reference length (ties go to the shorter reference); BLEU-n is the
  geometric mean of p_1..p_n times the penalty, and is 0 when any p_i is 0
  unless smoothing is requested.
* ROUGE-L: LCS F-measure with beta = 1.2, best reference per candidate,
  averaged over candidates.
* CIDEr: TF-IDF n-gram vectors (n = 1..4, natural-log idf from the
  reference corpus, document frequency floored at 1 for unseen n-grams),
  mean cosine against each reference, averaged over n and scaled by 10.
"""

from __future__ import annotations

import hashlib
import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

Tokens = Sequence[str]

METRIC_KEYS = ("bleu_1", "bleu_2", "bleu_3", "bleu_4", "bleu_avg", "cider", "rouge")


class MetricInputError(ValueError):
    pass


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _check(candidates, references) -> None:
    if not candidates:
        raise MetricInputError("empty candidate list")
    if len(candidates) != len(references):
        raise MetricInputError(f"{len(candidates)} candidates but {len(references)} reference sets")
    for i, refs in enumerate(references):
        if not refs:
            raise MetricInputError(f"candidate {i} has no references")


def _closest_ref_len(cand_len: int, refs: Sequence[Tokens]) -> int:
    return min((abs(len(r) - cand_len), len(r)) for r in refs)[1]


def bleu_stats(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]], max_n: int = 4):
    """Corpus totals: (matched[n], guessed[n], candidate length, reference length)."""
    _check(candidates, references)
    matched = [0] * max_n
    guessed = [0] * max_n
    c_len = r_len = 0
    for cand, refs in zip(candidates, references):
        c_len += len(cand)
        r_len += _closest_ref_len(len(cand), refs)
        for n in range(1, max_n + 1):
            counts = ngrams(cand, n)
            max_ref: Counter = Counter()
            for r in refs:
                max_ref |= ngrams(r, n)
            matched[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            guessed[n - 1] += max(0, len(cand) - n + 1)
    return matched, guessed, c_len, r_len


def bleu(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]], n: int = 4, smooth: bool = False) -> float:
    if not 1 <= n <= 4:
        raise MetricInputError(f"BLEU order must be 1..4, got {n}")
    matched, guessed, c_len, r_len = bleu_stats(candidates, references, n)
    return _bleu_from_stats(matched, guessed, c_len, r_len, n, smooth)


def _bleu_from_stats(matched, guessed, c_len, r_len, n, smooth) -> float:
    if c_len == 0:
        return 0.0
    log_p = 0.0
    for i in range(n):
        m, g = matched[i], guessed[i]
        if smooth and i > 0:
            # add-one smoothing on orders above 1
            m, g = m + 1, g + 1
        if m == 0 or g == 0:
            return 0.0
        log_p += math.log(m / g)
    bp = min(1.0, math.exp(1.0 - r_len / c_len))
    return bp * math.exp(log_p / n)


def bleu_all(candidates, references, smooth: bool = False) -> list[float]:
    """BLEU-1..4 from a single pass over the corpus."""
    matched, guessed, c_len, r_len = bleu_stats(candidates, references, 4)
    return [_bleu_from_stats(matched, guessed, c_len, r_len, n, smooth) for n in range(1, 5)]


def average_bleu(scores: Sequence[float]) -> float:
    return sum(scores) / len(scores)


def bleu_avg(candidates, references, smooth: bool = False) -> float:
    """Arithmetic mean of BLEU-1..4."""
    return average_bleu(bleu_all(candidates, references, smooth))


def lcs_length(a: Tokens, b: Tokens) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_pair(cand: Tokens, ref: Tokens, beta: float = 1.2) -> float:
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    r = lcs / len(ref)
    p = lcs / len(cand)
    return (1 + beta ** 2) * r * p / (r + beta ** 2 * p)


def rouge_l(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]], beta: float = 1.2) -> float:
    _check(candidates, references)
    scores = [max(rouge_l_pair(c, r, beta) for r in refs) for c, refs in zip(candidates, references)]
    return sum(scores) / len(scores)


def _fingerprint(references: Sequence[Sequence[Tokens]]) -> str:
    h = hashlib.sha256()
    for refs in references:
        for r in refs:
            h.update(" ".join(r).encode("utf-8"))
            h.update(b"\x1f")
        h.update(b"\x1e")
    return h.hexdigest()


@dataclass(frozen=True)
class CorpusStats:
    """Document frequencies of reference n-grams; one document per image."""

    num_images: int
    doc_freq: dict
    fingerprint: str
    max_n: int = 4

    @classmethod
    def from_references(cls, references: Sequence[Sequence[Tokens]], max_n: int = 4) -> "CorpusStats":
        df: Counter = Counter()
        for refs in references:
            seen = set()
            for r in refs:
                for n in range(1, max_n + 1):
                    seen.update(ngrams(r, n))
            df.update(seen)
        return cls(len(references), dict(df), _fingerprint(references), max_n)

    def idf(self, gram: tuple) -> float:
        return math.log(self.num_images / max(1, self.doc_freq.get(gram, 0)))


def _tfidf(tokens: Tokens, n: int, stats: CorpusStats) -> tuple[dict, float]:
    counts = ngrams(tokens, n)
    total = sum(counts.values())
    vec = {g: (c / total) * stats.idf(g) for g, c in counts.items()} if total else {}
    norm = math.sqrt(sum(v * v for v in vec.values()))
    return vec, norm


def _cosine(a: tuple[dict, float], b: tuple[dict, float]) -> float:
    (va, na), (vb, nb) = a, b
    if na == 0.0 or nb == 0.0:
        return 0.0
    if len(vb) < len(va):
        va, vb = vb, va
    return sum(v * vb.get(g, 0.0) for g, v in va.items()) / (na * nb)


def cider_image(cand: Tokens, refs: Sequence[Tokens], stats: CorpusStats) -> float:
    per_n = []
    for n in range(1, stats.max_n + 1):
        vc = _tfidf(cand, n, stats)
        per_n.append(sum(_cosine(vc, _tfidf(r, n, stats)) for r in refs) / len(refs))
    return 10.0 * sum(per_n) / len(per_n)


def cider(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]], stats: CorpusStats | None = None) -> float:
    _check(candidates, references)
    if stats is None:
        stats = CorpusStats.from_references(references)
    elif stats.num_images != len(references) or stats.fingerprint != _fingerprint(references):
        raise MetricInputError("corpus statistics were built from a different reference corpus")
    scores = [cider_image(c, refs, stats) for c, refs in zip(candidates, references)]
    return sum(scores) / len(scores)


def score_all(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]]) -> dict[str, float]:
    """The seven report columns: BLEU-1..4, BLEU-avg, CIDEr, ROUGE-L."""
    b = bleu_all(candidates, references)
    return {
        "bleu_1": b[0],
        "bleu_2": b[1],
        "bleu_3": b[2],
        "bleu_4": b[3],
        "bleu_avg": average_bleu(b),
        "cider": cider(candidates, references),
        "rouge": rouge_l(candidates, references),
    }
