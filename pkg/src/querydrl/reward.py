"""Composite future-reward: session feedback, ROUGE-1 relatedness, naturalness penalty."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import FeedbackIndex, Vocabulary, tokenize

ETA_BEAM = 1.0
ETA_CATEGORICAL = 0.01


@dataclass(frozen=True)
class RewardComponents:
    u_plus: int
    rouge: float
    d_phi: float
    eta: float

    def validate(self) -> None:
        if self.u_plus not in (0, 1):
            raise ValueError(f"u_plus must be 0 or 1, got {self.u_plus}")
        if not 0.0 <= self.rouge <= 1.0:
            raise ValueError(f"rouge out of [0, 1]: {self.rouge}")
        if not 0.0 <= self.d_phi <= 1.0:
            raise ValueError(f"d_phi out of [0, 1]: {self.d_phi}")
        if not (self.eta >= 0.0 and np.isfinite(self.eta)):
            raise ValueError(f"eta must be finite and non-negative: {self.eta}")


def rouge1(source: Sequence[str] | str, candidate: Sequence[str] | str) -> float:
    """Unigram-overlap F-measure with clipped counts."""
    src = tokenize(source) if isinstance(source, str) else list(source)
    cand = tokenize(candidate) if isinstance(candidate, str) else list(candidate)
    if not src or not cand:
        raise ValueError("rouge1 needs two non-empty token sequences")
    cs, cc = Counter(src), Counter(cand)
    overlap = sum(min(n, cc[w]) for w, n in cs.items())
    if overlap == 0:
        return 0.0
    precision = overlap / len(cand)
    recall = overlap / len(src)
    return 2 * precision * recall / (precision + recall)


def composite_reward(c: RewardComponents) -> float:
    """``U+ + (1 - U+) * (ROUGE - eta * (1 - D))``."""
    c.validate()
    return c.u_plus + (1 - c.u_plus) * (c.rouge - c.eta * (1.0 - c.d_phi))


@dataclass(frozen=True)
class RewardTrace:
    q_i: str
    y: str
    u_plus: int
    rouge: float
    d_phi: float
    reward: float

    def line(self) -> str:
        return f"{self.q_i}\t{self.y}\t{self.u_plus}\t{self.rouge:.6f}\t{self.d_phi:.6f}\t{self.reward:.6f}"


class RewardModel:
    """Scores complete generated queries against a feedback index and an estimator."""

    def __init__(self, feedback: FeedbackIndex, estimator, vocab: Vocabulary, eta: float):
        if eta < 0:
            raise ValueError("eta must be non-negative")
        self.feedback = feedback
        self.estimator = estimator
        self.vocab = vocab
        self.eta = eta

    def score(self, contexts: Sequence[str], candidates: Sequence[str]) -> list[RewardTrace]:
        traces = [None] * len(candidates)
        need = []
        for i, (q, y) in enumerate(zip(contexts, candidates)):
            if not tokenize(y):
                # an immediately terminated generation: no overlap, fully unnatural
                r = composite_reward(RewardComponents(0, 0.0, 0.0, self.eta))
                traces[i] = RewardTrace(q, y, 0, 0.0, 0.0, r)
            else:
                need.append(i)
        if need:
            d = self.estimator.predict(self.vocab, [contexts[i] for i in need], [candidates[i] for i in need])
            for i, d_phi in zip(need, d):
                q, y = contexts[i], candidates[i]
                u = self.feedback.u_plus(q, y)
                rg = rouge1(q, y)
                d_phi = float(np.clip(d_phi, 0.0, 1.0))
                traces[i] = RewardTrace(q, y, u, rg, d_phi, composite_reward(RewardComponents(u, rg, d_phi, self.eta)))
        return traces

    def rewards(self, contexts: Sequence[str], candidates: Sequence[str]) -> np.ndarray:
        return np.array([t.reward for t in self.score(contexts, candidates)])


def reward_for_sample(q_i: str, y: str, feedback: FeedbackIndex, estimator, vocab: Vocabulary, eta: float) -> float:
    return RewardModel(feedback, estimator, vocab, eta).score([q_i], [y])[0].reward
