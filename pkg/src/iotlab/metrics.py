"""Per-sentence scores for toy corpora."""

from __future__ import annotations

import math
from collections import Counter
from typing import Sequence


def exact_match(hyp: Sequence[int], ref: Sequence[int]) -> float:
    return float(list(hyp) == list(ref))


def token_accuracy(hyp: Sequence[int], ref: Sequence[int]) -> float:
    """Position-wise matches over the longer of the two lengths."""
    denom = max(len(hyp), len(ref))
    if denom == 0:
        return 1.0
    return sum(h == r for h, r in zip(hyp, ref)) / denom


def _ngrams(tokens: Sequence[int], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def sentence_bleu(hyp: Sequence[int], ref: Sequence[int], max_n: int = 4) -> float:
    """Sentence BLEU in [0, 100].

    Geometric mean of clipped n-gram precisions (add-one smoothed for n >= 2,
    raw for unigrams) times the brevity penalty.
    """
    if not ref:
        raise ValueError("sentence_bleu: empty reference")
    hyp, ref = list(hyp), list(ref)
    if not hyp:
        return 0.0
    log_p = 0.0
    for n in range(1, max_n + 1):
        h, r = _ngrams(hyp, n), _ngrams(ref, n)
        matches = sum(min(c, r[g]) for g, c in h.items())
        total = max(len(hyp) - n + 1, 0)
        if n == 1:
            if matches == 0:
                return 0.0
            log_p += math.log(matches / total)
        else:
            log_p += math.log((matches + 1) / (total + 1))
    bp = 1.0 if len(hyp) > len(ref) else math.exp(1.0 - len(ref) / len(hyp))
    return 100.0 * bp * math.exp(log_p / max_n)
