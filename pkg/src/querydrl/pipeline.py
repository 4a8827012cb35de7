"""Glue between the modules: data preparation, checkpoint I/O and evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import estimator as est
from . import generator as gen
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .corpus import (DataError, FeedbackIndex, QueryEvent, QueryPair, Vocabulary, build_vocab, extract_pairs,
                     segment_sessions, split_dataset)
from .metrics import SuggestionSet, metrics_report
from .optim import SGD, Adam
from .reward import RewardModel


@dataclass
class PreparedData:
    pairs: list
    train: list
    valid: list
    test: list
    vocab: Vocabulary
    n_sessions: int


def prepare_corpus(events: Sequence[QueryEvent], vocab_size: int, window_seconds: float = 300.0,
                   seed: int = 0) -> PreparedData:
    """Sessions, pairs, a 90/5/5 split and a vocabulary built from the training side only."""
    sessions = segment_sessions(events, window_seconds)
    pairs = [p for s in sessions for p in extract_pairs(s)]
    if not pairs:
        raise DataError("the log yields no query pairs")
    train, valid, test = split_dataset(pairs, seed=seed)
    vocab = build_vocab([q for p in train for q in (p.q_i, p.q_next)], vocab_size)
    return PreparedData(pairs, train, valid, test, vocab, len(sessions))


# ------------------------------------------------------------ checkpoints

def _pack(params: dict, optimizer=None, meta: dict | None = None) -> tuple[dict, dict]:
    arrays = {f"param/{n}": a for n, a in params.items()}
    meta = dict(meta or {})
    if optimizer is not None:
        state = optimizer.state_dict()
        meta["optimizer"] = {"type": type(optimizer).__name__, "step": state["step"], "lr": state["lr"]}
        if isinstance(optimizer, Adam):
            meta["optimizer"]["betas"] = list(optimizer.betas)
            meta["optimizer"]["eps"] = optimizer.eps
        for slot, a in state["slots"].items():
            arrays[f"opt/{slot}"] = a
    return arrays, meta


def _params_from(ckpt: Checkpoint) -> dict:
    return {k[len("param/"):]: a for k, a in ckpt.arrays.items() if k.startswith("param/")}


def restore_optimizer(ckpt: Checkpoint, params):
    """Rebuild the optimizer stored in ``ckpt`` over ``params`` (or None)."""
    info = ckpt.meta.get("optimizer")
    if info is None:
        return None
    slots = {k[len("opt/"):]: a for k, a in ckpt.arrays.items() if k.startswith("opt/")}
    if info["type"] == "Adam":
        opt = Adam(params, lr=info["lr"], betas=tuple(info["betas"]), eps=info["eps"])
    elif info["type"] == "SGD":
        opt = SGD(params, lr=info["lr"])
    else:
        raise CheckpointError(f"unknown optimizer type {info['type']!r}")
    opt.load_state_dict({"step": info["step"], "lr": info["lr"], "slots": slots})
    return opt


def save_generator(path, policy: gen.Seq2SeqPolicy, optimizer=None, step: int = 0, meta: dict | None = None) -> None:
    arrays, meta = _pack(policy.arrays(), optimizer, meta)
    meta.update(config=gen.config_dict(policy.config), step=step)
    save_checkpoint(path, Checkpoint("generator", arrays, meta))


def load_generator(path) -> tuple[gen.Seq2SeqPolicy, Checkpoint]:
    ckpt = load_checkpoint(path, expect_kind="generator")
    params = _params_from(ckpt)
    policy = gen.Seq2SeqPolicy(gen.config_from_dict(ckpt.meta["config"]))
    if set(params) != set(policy.params):
        raise CheckpointError(f"{path}: parameter names do not match the generator layout")
    for name, t in policy.params.items():
        t.data = params[name].copy()
    return policy, ckpt


def save_estimator(path, model: est.NaturalnessEstimator, optimizer=None, step: int = 0,
                   meta: dict | None = None) -> None:
    arrays, meta = _pack(model.arrays(), optimizer, meta)
    meta.update(config=est.config_dict(model.config), step=step)
    save_checkpoint(path, Checkpoint("estimator", arrays, meta))


def load_estimator(path) -> tuple[est.NaturalnessEstimator, Checkpoint]:
    ckpt = load_checkpoint(path, expect_kind="estimator")
    params = _params_from(ckpt)
    model = est.NaturalnessEstimator(est.EstimatorConfig(**ckpt.meta["config"]))
    if set(params) != set(model.params):
        raise CheckpointError(f"{path}: parameter names do not match the estimator layout")
    for name, t in model.params.items():
        t.data = params[name].copy()
    return model, ckpt


# ------------------------------------------------------------- evaluation

def suggestion_sets(policy, vocab: Vocabulary, pairs: Sequence[QueryPair], t_max: int = 8) -> list[SuggestionSet]:
    sugg = gen.suggest(policy, vocab, [p.q_i for p in pairs], t_max=t_max)
    return [SuggestionSet(p.q_i, p.q_next, s) for p, s in zip(pairs, sugg)]


def evaluate_policy(policy, vocab: Vocabulary, pairs: Sequence[QueryPair], feedback: FeedbackIndex,
                    reward_model: RewardModel | None = None, t_max: int = 8) -> dict:
    """Metric report over six beam suggestions per query.

    With a reward model, a ``mean_reward`` row (mean composite reward of the
    suggestions of each pair) is added.
    """
    sets = suggestion_sets(policy, vocab, pairs, t_max)
    extra = None
    if reward_model is not None:
        per_pair = []
        for s in sets:
            if s.suggestions:
                per_pair.append(float(np.mean(reward_model.rewards([s.q_i] * len(s.suggestions), s.suggestions))))
        extra = {"mean_reward": per_pair}
    return metrics_report(sets, feedback, vocab, extra)


# ----------------------------------------------------------------- stages
# Shared by the command line and the end-to-end tests; ``cfg`` is a resolved RunConfig.

def pretrain_stage(train: Sequence[QueryPair], valid: Sequence[QueryPair], vocab: Vocabulary,
                   cfg) -> gen.PretrainResult:
    policy = gen.Seq2SeqPolicy(gen.default_config(
        vocab, emb_dim=cfg.emb_dim, hidden=cfg.hidden, dec_hidden=cfg.dec_hidden, attn_dim=cfg.attn_dim,
        enc_layers=cfg.enc_layers, dropout=cfg.dropout), seed=cfg.seed)
    return gen.pretrain_supervised(
        policy, gen.encode_pairs(train, vocab, cfg.t_max), gen.encode_pairs(valid, vocab, cfg.t_max),
        gen.PretrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr, t_max=cfg.t_max, seed=cfg.seed))


def estimator_examples(policy, train: Sequence[QueryPair], valid: Sequence[QueryPair], vocab: Vocabulary,
                       cfg) -> tuple[list, list]:
    """Positive and negative examples for the first ``est_pairs`` training pairs and all validation pairs."""
    rng = np.random.default_rng(cfg.seed)
    return (est.build_examples(train[:cfg.est_pairs], policy, vocab, rng, cfg.t_max),
            est.build_examples(valid, policy, vocab, rng, cfg.t_max))


def estimator_stage(examples: Sequence, v_examples: Sequence, vocab: Vocabulary, cfg) -> est.EstimatorResult:
    model = est.NaturalnessEstimator(est.EstimatorConfig(
        len(vocab), emb_dim=cfg.emb_dim, hidden=cfg.est_hidden, layers=cfg.est_layers, dropout=cfg.est_dropout,
        t_max=cfg.t_max, sep_id=vocab.sep_id), seed=cfg.seed)
    return est.train_estimator(model, vocab, examples, v_examples, est.EstimatorTrainConfig(
        epochs=cfg.est_epochs, batch_size=cfg.est_batch_size, lr=cfg.est_lr, seed=cfg.seed))


def finetune_stage(policy, estimator, train: Sequence[QueryPair], valid: Sequence[QueryPair], vocab: Vocabulary,
                   cfg, counter=None):
    from .reinforce import TrainConfig, finetune

    reward_model = RewardModel(FeedbackIndex.from_pairs(train), estimator, vocab, cfg.eta)
    tc = TrainConfig(k=cfg.k, eta=cfg.eta, lr=cfg.rl_lr, batch_size=cfg.rl_batch_size, strategy=cfg.strategy,
                     max_len=cfg.t_max, t_max=cfg.t_max, epochs=cfg.rl_epochs,
                     steps_per_epoch=cfg.rl_steps_per_epoch, sync_every=cfg.sync_every, clip_norm=cfg.clip_norm,
                     seed=cfg.seed, n_valid=cfg.n_valid)
    return finetune(policy, reward_model, vocab, train, valid, FeedbackIndex.from_pairs(valid), tc, counter)
