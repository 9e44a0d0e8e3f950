"""Pure text similarity and diversity metrics.

One canonical normalizer feeds every metric so the acceptance gate, response
selection, and evaluation all score text the same way. All functions are
stateless and safe for concurrent use.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, fields
from typing import Callable, Sequence

TokenSeq = Sequence[str]

_PUNCT = re.compile(r"[^\w\s]")
_WS = re.compile(r"\s+")

#: Additive floor applied to zero n-gram precisions so BLEU stays total.
BLEU_EPSILON = 1e-9


def normalize(text: str) -> str:
    """Lowercase, replace punctuation with spaces, collapse whitespace."""
    return _WS.sub(" ", _PUNCT.sub(" ", text.lower())).strip()


def tokenize(text: str) -> list[str]:
    """Canonical tokenization: normalize then split on whitespace."""
    norm = normalize(text)
    return norm.split() if norm else []


def lcs_length(a: TokenSeq, b: TokenSeq) -> int:
    """Longest common subsequence length via the standard dynamic program."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for tok_a in a:
        cur = [0]
        for j, tok_b in enumerate(b):
            if tok_a == tok_b:
                cur.append(prev[j] + 1)
            else:
                cur.append(max(prev[j + 1], cur[-1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: TokenSeq, reference: TokenSeq) -> float:
    """LCS-based F-measure with equal precision/recall weighting.

    Returns 0.0 when either sequence is empty or nothing is shared.
    """
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    precision = lcs / len(candidate)
    recall = lcs / len(reference)
    return 2 * precision * recall / (precision + recall)


def token_f1(candidate: TokenSeq, reference: TokenSeq) -> float:
    """Unigram overlap F1 with multiset intersection counts."""
    if not candidate or not reference:
        return 0.0
    overlap = sum((Counter(candidate) & Counter(reference)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(candidate)
    recall = overlap / len(reference)
    return 2 * precision * recall / (precision + recall)


def _ngram_counts(tokens: TokenSeq, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_n(candidate: TokenSeq, references: Sequence[TokenSeq], n: int = 4) -> float:
    """Geometric mean of clipped n-gram precisions with brevity penalty.

    Clipping is against the maximum count over all references. Zero
    precisions are floored at ``BLEU_EPSILON`` so the score is total.
    """
    if n < 1:
        raise ValueError("n-gram order must be >= 1")
    if not references:
        raise ValueError("at least one reference required")
    if not candidate:
        return 0.0
    log_sum = 0.0
    for order in range(1, n + 1):
        cand_counts = _ngram_counts(candidate, order)
        total = sum(cand_counts.values())
        if total == 0:
            log_sum += math.log(BLEU_EPSILON)
            continue
        max_ref: Counter = Counter()
        for ref in references:
            for gram, count in _ngram_counts(ref, order).items():
                if count > max_ref[gram]:
                    max_ref[gram] = count
        clipped = sum(min(count, max_ref[gram]) for gram, count in cand_counts.items())
        precision = clipped / total
        log_sum += math.log(precision) if precision > 0 else math.log(BLEU_EPSILON)
    # Closest reference length, ties to the shorter reference.
    cand_len = len(candidate)
    ref_len = min((abs(len(r) - cand_len), len(r)) for r in references)[1]
    brevity = 1.0 if cand_len > ref_len else math.exp(1 - ref_len / max(cand_len, 1))
    return brevity * math.exp(log_sum / n)


def self_bleu(responses: Sequence[TokenSeq], n: int = 4) -> float:
    """Mean BLEU of each response against all the others; lower is more diverse."""
    if len(responses) < 2:
        raise ValueError("self-BLEU needs at least 2 responses")
    scores = []
    for i, resp in enumerate(responses):
        others = [r for j, r in enumerate(responses) if j != i]
        scores.append(bleu_n(resp, others, n))
    return sum(scores) / len(scores)


def distinct_n(responses: Sequence[TokenSeq], n: int = 2) -> float:
    """Distinct n-grams across all responses divided by total n-gram count."""
    total = 0
    seen: set[tuple] = set()
    for resp in responses:
        for i in range(len(resp) - n + 1):
            seen.add(tuple(resp[i : i + n]))
            total += 1
    if total == 0:
        raise ValueError(f"no {n}-grams in any response")
    return len(seen) / total


def _sim_rouge_l(a: str, b: str) -> float:
    return rouge_l(tokenize(a), tokenize(b))


def _sim_token_f1(a: str, b: str) -> float:
    return token_f1(tokenize(a), tokenize(b))


def _sim_bleu(a: str, b: str) -> float:
    return bleu_n(tokenize(a), [tokenize(b)], n=4)


#: Registry of text-level similarity metrics for the matching gate.
#: A sentence-embedding metric could be registered under a new id; none ships.
SIMILARITY_METRICS: dict[str, Callable[[str, str], float]] = {
    "rouge_l": _sim_rouge_l,
    "token_f1": _sim_token_f1,
    "bleu": _sim_bleu,
}

DEFAULT_METRIC = "rouge_l"


def similarity(candidate: str, reference: str, kind: str = DEFAULT_METRIC) -> float:
    """Normalize both texts and dispatch to the named metric."""
    try:
        fn = SIMILARITY_METRICS[kind]
    except KeyError:
        raise ValueError(f"unknown similarity metric: {kind!r}") from None
    return fn(candidate, reference)


@dataclass
class MetricReport:
    """Aggregate scores, each a fraction in [0, 1] (or None when not computed)."""

    f1: float
    rouge_l: float
    self_bleu: float | None = None
    distinct: float | None = None
    matching_rate: float | None = None

    def __post_init__(self) -> None:
        for field in fields(self):
            value = getattr(self, field.name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValueError(f"{field.name} out of [0, 1]: {value}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}
