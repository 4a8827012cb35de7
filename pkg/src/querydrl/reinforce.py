"""REINFORCE fine-tuning of the generator with start-state Monte-Carlo rollouts."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .corpus import QueryPair, Vocabulary, decode, encode
from .decoding import StepCounter
from .generator import rollout, suggest
from .optim import SGD, clip_by_global_norm
from .reward import RewardModel

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    k: int = 4
    eta: float = 1.0
    lr: float = 3e-5
    batch_size: int = 32
    strategy: str = "beam"
    max_len: int = 8
    t_max: int = 8
    epochs: int = 3
    steps_per_epoch: int | None = None  # None: one pass over the training pairs
    sync_every: int | None = None       # None: once per epoch
    clip_norm: float = 5.0
    seed: int = 0
    monitor_every: int = 20
    converge_window: int = 5
    converge_tol: float = 1e-3
    n_valid: int | None = None

    def validate(self) -> None:
        if self.k < 1 or self.batch_size < 1 or self.max_len < 1:
            raise ValueError("k, batch_size and max_len must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.sync_every is not None and self.sync_every < 1:
            raise ValueError("sync_every must be >= 1")
        if self.strategy not in ("beam", "categorical"):
            raise ValueError(f"unknown strategy {self.strategy!r}")


@dataclass
class StepStats:
    step: int
    mean_reward: float
    monitor_loss: float
    grad_norm: float
    rollout_steps_per_query: int


@dataclass
class FinetuneResult:
    policy: object
    stats: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    best_epoch: int = -1
    converged: bool = False


class RolloutPolicy:
    """Frozen snapshot of the generator used to draw Monte-Carlo samples."""

    def __init__(self, policy):
        self.policy = policy.copy()
        self.syncs = 1

    def sync(self, policy) -> None:
        for name, t in policy.params.items():
            self.policy.params[name].data = t.data.copy()
        self.syncs += 1


def monitor_loss(rewards: np.ndarray, log_probs: np.ndarray) -> float:
    """Reward-weighted negative log-likelihood, averaged over all samples."""
    rewards = np.asarray(rewards, dtype=np.float64)
    log_probs = np.asarray(log_probs, dtype=np.float64)
    if rewards.size == 0:
        return 0.0
    return float(np.mean(-rewards * log_probs))


def policy_gradient_step(policy, optimizer, sources: Sequence, rollouts: Sequence[Sequence], rewards: Sequence,
                         clip_norm: float | None = 5.0) -> dict:
    """One ascent step on the Monte-Carlo estimate of the expected reward.

    ``rollouts[b]`` holds the K sequences drawn for ``sources[b]`` and
    ``rewards[b]`` their rewards.  Log-probabilities are scored under the
    current parameters.  The step descends on
    ``-(1/B) sum_b (1/K) sum_k R_bk log G(y_bk | source_b)``.
    """
    src_rows, seqs, weights, flat_r = [], [], [], []
    n_batch = len(sources)
    for src, ys, rs in zip(sources, rollouts, rewards):
        for y, r in zip(ys, rs):
            src_rows.append(src)
            seqs.append(list(y))
            weights.append(float(r) / (len(ys) * n_batch))
            flat_r.append(float(r))
    dtype = policy.parameters()[0].data.dtype
    with Tape() as tape:
        logp = policy.sequence_log_prob(src_rows, seqs)
        loss = ad.neg(ad.tensor_sum(ad.mul(logp, np.asarray(weights, dtype=dtype))))
    params = policy.parameters()
    grads = tape.backward(loss, params)
    clipped, norm = clip_by_global_norm(grads, clip_norm)
    if not np.isfinite(norm):
        raise ad.NonFiniteError("non-finite policy gradient")
    optimizer.step(clipped)
    return {
        "grad_norm": norm,
        "monitor_loss": monitor_loss(flat_r, logp.data),
        "mean_reward": float(np.mean(flat_r)) if flat_r else 0.0,
        "grads": grads,
    }


def mean_suggestion_reward(policy, reward_model: RewardModel, vocab: Vocabulary, pairs: Sequence[QueryPair],
                           t_max: int = 8, n: int = 6) -> float:
    """Mean composite reward over the beam-search suggestions for each query."""
    sugg = suggest(policy, vocab, [p.q_i for p in pairs], n=n, t_max=t_max)
    ctx, cand = [], []
    for p, ss in zip(pairs, sugg):
        for s in ss:
            ctx.append(p.q_i)
            cand.append(s)
    return float(np.mean(reward_model.rewards(ctx, cand))) if cand else 0.0


def mean_sampled_reward(policy, reward_model: RewardModel, vocab: Vocabulary, pairs: Sequence[QueryPair],
                        k: int, strategy: str, seed: int, t_max: int = 8, max_len: int = 8) -> float:
    """Mean composite reward of ``k`` rollouts per query under ``strategy``."""
    rng = np.random.default_rng(seed)
    sources = [encode(p.q_i, vocab, t_max) for p in pairs]
    seqs = rollout(policy, sources, k, max_len, strategy, rng)
    ctx, cand = [], []
    for p, ys in zip(pairs, seqs):
        for y in ys:
            ctx.append(p.q_i)
            cand.append(decode(y, vocab))
    return float(np.mean(reward_model.rewards(ctx, cand))) if cand else 0.0


def validation_scores(policy, reward_model: RewardModel, vocab: Vocabulary, pairs: Sequence[QueryPair],
                      feedback, t_max: int = 8) -> dict:
    from .metrics import sessions_plus_at6
    sugg = suggest(policy, vocab, [p.q_i for p in pairs], t_max=t_max)
    ctx, cand = [], []
    for p, ss in zip(pairs, sugg):
        ctx.extend([p.q_i] * len(ss))
        cand.extend(ss)
    rewards = reward_model.rewards(ctx, cand) if cand else np.zeros(0)
    return {
        "sessions_plus_at6": float(np.mean([sessions_plus_at6(ss, feedback) for ss in sugg])) if sugg else 0.0,
        "mean_reward": float(rewards.mean()) if rewards.size else 0.0,
    }


def _converged(history: list, window: int, tol: float) -> bool:
    if len(history) < window:
        return False
    recent = np.asarray(history[-window:])
    scale = max(abs(float(recent.mean())), 1e-12)
    return float(recent.max() - recent.min()) / scale < tol


def finetune(policy, reward_model: RewardModel, vocab: Vocabulary, train_pairs: Sequence[QueryPair],
             valid_pairs: Sequence[QueryPair], valid_feedback, config: TrainConfig,
             counter: StepCounter | None = None) -> FinetuneResult:
    """REINFORCE loop with a periodically synchronised rollout policy.

    Returns the parameters with the best validation Sessions+@6 (ties go to
    the higher mean validation reward, then the earlier epoch).
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    optimizer = SGD(policy.parameters(), lr=config.lr)
    beta = RolloutPolicy(policy)
    sources_all = [encode(p.q_i, vocab, config.t_max) for p in train_pairs]
    n_batches = max(1, (len(train_pairs) + config.batch_size - 1) // config.batch_size)
    steps_per_epoch = min(n_batches, config.steps_per_epoch or n_batches)
    sync_every = config.sync_every or steps_per_epoch
    valid = list(valid_pairs[:config.n_valid]) if config.n_valid else list(valid_pairs)
    counter = counter if counter is not None else StepCounter()

    result = FinetuneResult(policy)
    best_key, best_params = None, None
    smoothed, window_losses = [], []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_pairs))
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            if len(idx) == 0:
                break
            sources = [sources_all[i] for i in idx]
            counter.reset()
            seqs = rollout(beta.policy, sources, config.k, config.max_len, config.strategy, rng, counter)
            contexts, cands = [], []
            for i, ys in zip(idx, seqs):
                for y in ys:
                    contexts.append(train_pairs[i].q_i)
                    cands.append(decode(y, vocab))
            flat = reward_model.rewards(contexts, cands)
            rewards, pos = [], 0
            for ys in seqs:
                rewards.append(flat[pos:pos + len(ys)])
                pos += len(ys)
            out = policy_gradient_step(policy, optimizer, sources, seqs, rewards, config.clip_norm)
            step += 1
            if not np.isfinite(out["monitor_loss"]):
                raise ad.NonFiniteError(f"monitoring loss diverged at step {step}")
            result.stats.append(StepStats(step, out["mean_reward"], out["monitor_loss"], out["grad_norm"],
                                          counter.max_per_source()))
            window_losses.append(out["monitor_loss"])
            if len(window_losses) == config.monitor_every:
                smoothed.append(float(np.mean(window_losses)))
                window_losses = []
                log.info("rl step %d reward %.4f monitor %.4f", step, out["mean_reward"], smoothed[-1])
            if step % sync_every == 0:
                beta.sync(policy)
        scores = validation_scores(policy, reward_model, vocab, valid, valid_feedback, config.t_max)
        scores["epoch"] = epoch
        result.validation.append(scores)
        log.info("rl epoch %d valid sessions+@6 %.4f reward %.4f", epoch, scores["sessions_plus_at6"],
                 scores["mean_reward"])
        key = (scores["sessions_plus_at6"], scores["mean_reward"])
        if best_key is None or key > best_key:
            best_key, best_params = key, policy.copy()
            result.best_epoch = epoch
        if _converged(smoothed, config.converge_window, config.converge_tol):
            result.converged = True
            break
    result.policy = best_params if best_params is not None else policy
    return result


def format_stats(stats: Sequence[StepStats]) -> str:
    lines = ["step\tmean_reward\tmonitor_loss\tgrad_norm"]
    for s in stats:
        lines.append(f"{s.step}\t{s.mean_reward:.6f}\t{s.monitor_loss:.6f}\t{s.grad_norm:.6f}")
    return "\n".join(lines) + "\n"
