"""Suggestion-quality metrics and t-distribution confidence intervals."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from .corpus import UNK, FeedbackIndex, Vocabulary, tokenize

METRICS = ("sessions_plus_at6", "unique_at6", "precision_at6", "repetitions_s", "prior_sentence_prob")


def sessions_plus_at6(suggestions: Sequence[str], feedback: FeedbackIndex) -> int:
    return int(any(feedback.is_engaged(s) for s in suggestions[:6]))


def unique_at6(suggestions: Sequence[str]) -> int:
    return len({s for s in suggestions[:6] if UNK not in tokenize(s)})


def precision_at6(suggestions: Sequence[str], q_next: str) -> int:
    return int(q_next in suggestions[:6])


def repetitions_s(suggestion: str) -> float:
    toks = tokenize(suggestion)
    if not toks:
        raise ValueError("empty suggestion")
    return (len(toks) - len(set(toks))) / len(toks)


def prior_sentence_prob(suggestion: str, vocab: Vocabulary) -> float:
    """Sum of natural-log unigram priors of the suggestion's words."""
    total = 0.0
    for tok in tokenize(suggestion):
        p = vocab.token_prior(tok)
        if p <= 0.0:
            raise ValueError(f"token {tok!r} has zero prior probability")
        total += math.log(p)
    return total


def mean_with_ci(values: Sequence[float], confidence: float = 0.95) -> tuple[float, float]:
    """Mean and half-width of the two-sided t-interval."""
    x = np.asarray(values, dtype=np.float64)
    n = x.size
    if n < 2:
        raise ValueError("need at least two values for a confidence interval")
    sd = x.std(ddof=1)
    half = stats.t.ppf(0.5 + confidence / 2, n - 1) * sd / math.sqrt(n)
    return float(x.mean()), float(half)


@dataclass
class MetricSummary:
    mean: float
    ci: float
    n: int


@dataclass
class SuggestionSet:
    q_i: str
    q_next: str
    suggestions: list


def per_pair_values(sets: Sequence[SuggestionSet], feedback: FeedbackIndex, vocab: Vocabulary) -> dict:
    """Raw per-pair values for each metric.

    Repetitions and prior sentence probability are per suggestion and
    averaged within the pair; pairs without suggestions contribute nothing
    to those two.
    """
    vals = {m: [] for m in METRICS}
    for s in sets:
        vals["sessions_plus_at6"].append(sessions_plus_at6(s.suggestions, feedback))
        vals["unique_at6"].append(unique_at6(s.suggestions))
        vals["precision_at6"].append(precision_at6(s.suggestions, s.q_next))
        sugg = [x for x in s.suggestions[:6] if tokenize(x)]
        if sugg:
            vals["repetitions_s"].append(float(np.mean([repetitions_s(x) for x in sugg])))
            vals["prior_sentence_prob"].append(float(np.mean([prior_sentence_prob(x, vocab) for x in sugg])))
    return vals


def metrics_report(sets: Sequence[SuggestionSet], feedback: FeedbackIndex, vocab: Vocabulary,
                   extra: dict | None = None) -> dict[str, MetricSummary]:
    vals = per_pair_values(sets, feedback, vocab)
    if extra:
        vals.update(extra)
    return {m: MetricSummary(*mean_with_ci(v), len(v)) for m, v in vals.items()}


def format_report(report: dict[str, MetricSummary]) -> str:
    lines = ["metric\tmean\tci\tn"]
    for m, s in report.items():
        lines.append(f"{m}\t{s.mean:.6f}\t{s.ci:.6f}\t{s.n}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict[str, MetricSummary]:
    out = {}
    for line in text.strip().splitlines()[1:]:
        m, mean, ci, n = line.split("\t")
        out[m] = MetricSummary(float(mean), float(ci), int(n))
    return out


def compare_reports(baseline: dict[str, MetricSummary], candidate: dict[str, MetricSummary]) -> str:
    """Side-by-side means with the relative change of the candidate."""
    lines = ["metric\tbaseline\tcandidate\trelative_delta"]
    for m in baseline:
        if m not in candidate:
            continue
        b, c = baseline[m].mean, candidate[m].mean
        rel = (c - b) / abs(b) if b != 0 else float("nan")
        lines.append(f"{m}\t{b:.6f}\t{c:.6f}\t{rel:+.6f}")
    return "\n".join(lines) + "\n"
