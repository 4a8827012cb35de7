"""Beam search, greedy and categorical decoding over a step policy.

A step policy is any object exposing::

    start_id, end_id, vocab_size
    start(sources) -> state              # one row per source
    step(state, prev_tokens) -> (log_probs (rows, V) ndarray, state)
    select(state, rows) -> state         # gather / reorder rows

Impossible tokens carry ``-inf`` log-probability.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple
    log_prob: float
    finished: bool = True


class StepCounter:
    """Counts decoder-row evaluations per source index."""

    def __init__(self):
        self.per_source: dict[int, int] = defaultdict(int)

    def add(self, sources: np.ndarray) -> None:
        for s, n in zip(*np.unique(sources, return_counts=True)):
            self.per_source[int(s)] += int(n)

    @property
    def total(self) -> int:
        return sum(self.per_source.values())

    def max_per_source(self) -> int:
        return max(self.per_source.values(), default=0)

    def reset(self) -> None:
        self.per_source.clear()


def _rank_key(h: Hypothesis):
    return (-h.log_prob, h.tokens)


def beam_search_batch(policy, sources: Sequence, width: int, max_len: int,
                      counter: StepCounter | None = None) -> list[list[Hypothesis]]:
    """Beam search for several sources at once.

    Finished hypotheses are frozen and compete on total log-probability (no
    length normalisation).  Each source gets up to ``width`` hypotheses,
    ranked by score with ties broken by the smaller token sequence.
    """
    if width < 1 or max_len < 1:
        raise ValueError("width and max_len must be >= 1")
    n_src = len(sources)
    state = policy.start(sources)
    vocab = policy.vocab_size
    active: list[list[Hypothesis]] = [[Hypothesis((), 0.0, False)] for _ in range(n_src)]
    finished: list[list[Hypothesis]] = [[] for _ in range(n_src)]
    owner = np.arange(n_src)
    prev = np.full(n_src, policy.start_id, dtype=np.int64)

    for t in range(max_len):
        if owner.size == 0:
            break
        if counter is not None:
            counter.add(owner)
        logp, state = policy.step(state, prev)
        keep_rows, keep_prev, new_owner = [], [], []
        row = 0
        for q in range(n_src):
            hyps = active[q]
            if not hyps:
                continue
            n = len(hyps)
            rows = np.arange(row, row + n)
            row += n
            scores = np.array([h.log_prob for h in hyps])[:, None] + logp[rows]
            flat = scores.ravel()
            valid = np.isfinite(flat)
            n_valid = int(valid.sum())
            if n_valid == 0:
                active[q] = []
                continue
            k = min(width, n_valid)
            masked = np.where(valid, flat, -np.inf)
            kth = np.partition(masked, masked.size - k)[masked.size - k]
            cand = np.nonzero(masked >= kth)[0]
            cand = sorted(cand, key=lambda i: (-masked[i], hyps[i // vocab].tokens + (int(i % vocab),)))[:width]
            nxt = []
            for i in cand:
                parent, tok = int(i // vocab), int(i % vocab)
                toks = hyps[parent].tokens + (tok,)
                score = float(masked[i])
                if tok == policy.end_id or len(toks) == max_len:
                    finished[q].append(Hypothesis(toks, score, True))
                else:
                    nxt.append(Hypothesis(toks, score, False))
                    keep_rows.append(rows[parent])
                    keep_prev.append(tok)
                    new_owner.append(q)
            if len(finished[q]) >= width and nxt:
                floor = sorted(finished[q], key=_rank_key)[width - 1].log_prob
                if nxt[0].log_prob <= floor:
                    # scores only decrease, so no active beam can enter the top-k
                    drop = len(nxt)
                    del keep_rows[-drop:], keep_prev[-drop:], new_owner[-drop:]
                    nxt = []
            active[q] = nxt
        owner = np.asarray(new_owner, dtype=np.int64)
        prev = np.asarray(keep_prev, dtype=np.int64)
        if owner.size:
            state = policy.select(state, np.asarray(keep_rows, dtype=np.int64))
    return [sorted(f, key=_rank_key)[:width] for f in finished]


def beam_search(policy, source, width: int, max_len: int, counter: StepCounter | None = None) -> list[Hypothesis]:
    return beam_search_batch(policy, [source], width, max_len, counter)[0]


def greedy_decode(policy, sources: Sequence, max_len: int) -> list[Hypothesis]:
    """Per-step argmax decoding (lowest token id wins ties)."""
    n_src = len(sources)
    state = policy.start(sources)
    tokens = [[] for _ in range(n_src)]
    scores = np.zeros(n_src)
    alive = np.arange(n_src)
    prev = np.full(n_src, policy.start_id, dtype=np.int64)
    for t in range(max_len):
        logp, state = policy.step(state, prev)
        choice = np.argmax(logp, axis=1)
        still, nxt_rows = [], []
        for r, q in enumerate(alive):
            tok = int(choice[r])
            tokens[q].append(tok)
            scores[q] += logp[r, tok]
            if tok != policy.end_id and len(tokens[q]) < max_len:
                still.append(q)
                nxt_rows.append(r)
        if not still:
            break
        state = policy.select(state, np.asarray(nxt_rows))
        prev = choice[nxt_rows]
        alive = np.asarray(still)
    return [Hypothesis(tuple(t), float(s), True) for t, s in zip(tokens, scores)]


def sample_categorical(policy, sources: Sequence, k: int, max_len: int, rng: np.random.Generator,
                       temperature: float = 1.0, counter: StepCounter | None = None) -> list[list[Hypothesis]]:
    """Draw ``k`` independent sequences per source from the per-step softmax.

    ``log_prob`` of each hypothesis is scored under the untempered policy.
    """
    if k < 1 or max_len < 1:
        raise ValueError("k and max_len must be >= 1")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    n_src = len(sources)
    state = policy.select(policy.start(sources), np.repeat(np.arange(n_src), k))
    n_rows = n_src * k
    tokens = [[] for _ in range(n_rows)]
    scores = np.zeros(n_rows)
    alive = np.arange(n_rows)
    prev = np.full(n_rows, policy.start_id, dtype=np.int64)
    for t in range(max_len):
        if counter is not None:
            counter.add(alive // k)
        logp, state = policy.step(state, prev)
        z = np.asarray(logp, dtype=np.float64) / temperature
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        cdf = np.cumsum(p, axis=1)
        cdf /= cdf[:, -1:]
        u = 1.0 - rng.random(alive.size)  # in (0, 1]
        choice = np.minimum((cdf < u[:, None]).sum(axis=1), logp.shape[1] - 1)
        still, nxt_rows = [], []
        for r, q in enumerate(alive):
            tok = int(choice[r])
            tokens[q].append(tok)
            scores[q] += logp[r, tok]
            if tok != policy.end_id and len(tokens[q]) < max_len:
                still.append(q)
                nxt_rows.append(r)
        if not still:
            break
        state = policy.select(state, np.asarray(nxt_rows))
        prev = choice[nxt_rows]
        alive = np.asarray(still)
    hyps = [Hypothesis(tuple(t), float(s), True) for t, s in zip(tokens, scores)]
    return [hyps[i * k:(i + 1) * k] for i in range(n_src)]
