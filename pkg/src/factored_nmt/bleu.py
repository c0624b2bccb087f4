"""Corpus-level BLEU with brevity penalty (single reference, unsmoothed)."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import List, Sequence, Tuple


@dataclass
class BleuResult:
    score: float
    precisions: List[float]  # modified n-gram precision for n = 1..max_n
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    matches: List[int]
    totals: List[int]

    def format(self) -> str:
        prec = "/".join(f"{100 * p:.1f}" for p in self.precisions)
        ratio = self.hyp_len / self.ref_len if self.ref_len else 0.0
        return (
            f"BLEU = {self.score:.2f} {prec} "
            f"(BP = {self.brevity_penalty:.3f} ratio = {ratio:.3f} "
            f"hyp_len = {self.hyp_len} ref_len = {self.ref_len})"
        )


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(
    hypotheses: Sequence[Sequence[str]],
    references: Sequence[Sequence[str]],
    max_n: int = 4,
) -> BleuResult:
    """BLEU over the whole corpus: clipped n-gram matches are summed across
    sentences, combined by geometric mean and scaled by the brevity penalty.

    Unsmoothed: any order with zero matches (but candidates present) zeroes
    the score. Orders for which the corpus contains no hypothesis n-grams at
    all (every sentence shorter than n) are dropped from the geometric mean
    so that identical short corpora still score 100.
    """
    if len(references) == 0:
        raise ValueError("references must be non-empty")
    if len(hypotheses) != len(references):
        raise ValueError(
            f"sentence counts differ: {len(hypotheses)} hypotheses, {len(references)} references"
        )

    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            hyp_counts = _ngrams(hyp, n)
            if not hyp_counts:
                continue
            ref_counts = _ngrams(ref, n)
            totals[n - 1] += sum(hyp_counts.values())
            matches[n - 1] += sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())

    precisions = [(m / t) if t else 0.0 for m, t in zip(matches, totals)]
    if hyp_len == 0:
        return BleuResult(0.0, precisions, 0.0, hyp_len, ref_len, matches, totals)

    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    effective = [(m, t) for m, t in zip(matches, totals) if t > 0]
    if any(m == 0 for m, _ in effective):
        score = 0.0
    else:
        log_mean = sum(math.log(m / t) for m, t in effective) / len(effective)
        score = 100.0 * bp * math.exp(log_mean)
    return BleuResult(score, precisions, bp, hyp_len, ref_len, matches, totals)
