"""Character-level corpus BLEU (one reference per candidate, no smoothing)."""

from __future__ import annotations

import math
from collections import Counter
from typing import Sequence

from .autodiff import ContractViolation

MAX_ORDER = 4


def _ngrams(seq: Sequence, n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def bleu_corpus(candidates: Sequence[Sequence], references: Sequence[Sequence]) -> float:
    """Corpus BLEU in [0, 100] over single-character tokens.

    Clipped n-gram matches and totals are pooled over the corpus for orders
    1..N, where N = min(4, shortest reference length). The brevity penalty is
    exp(1 - r/c) when the pooled candidate length c is below the pooled
    reference length r. Any zero precision gives 0.
    """
    if len(candidates) != len(references):
        raise ContractViolation(f"{len(candidates)} candidates for {len(references)} references")
    if not candidates:
        raise ContractViolation("empty corpus")
    order = min(MAX_ORDER, min(len(r) for r in references))
    if order < 1:
        raise ContractViolation("references must be nonempty")

    matches = [0] * order
    totals = [0] * order
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        c_len += len(cand)
        r_len += len(ref)
        for n in range(1, order + 1):
            cand_counts = _ngrams(cand, n)
            ref_counts = _ngrams(ref, n)
            matches[n - 1] += sum(min(k, ref_counts[g]) for g, k in cand_counts.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)

    if c_len == 0 or min(matches) == 0:
        return 0.0
    log_precision = sum(math.log(m / t) for m, t in zip(matches, totals)) / order
    brevity = 1.0 if c_len >= r_len else math.exp(1 - r_len / c_len)
    return 100.0 * brevity * math.exp(log_precision)
