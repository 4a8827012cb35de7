"""Seq2Seq query generator: BiLSTM encoder, additive attention, LSTM decoder."""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .corpus import QueryPair, Vocabulary, decode, encode
from .decoding import StepCounter, beam_search_batch, sample_categorical
from .optim import Adam

log = logging.getLogger(__name__)

NEG_INF_LOGIT = -1e9
INIT_SCALE = 0.08


@dataclass
class GeneratorConfig:
    vocab_size: int
    emb_dim: int = 48
    hidden: int = 64
    dec_hidden: int = 96
    attn_dim: int = 64
    enc_layers: int = 1
    dropout: float = 0.2
    start_id: int = 2
    end_id: int = 3
    banned_ids: tuple = (0, 2, 4)  # <PAD>, <START>, <SEP> are never generated


def init_lstm(rng: np.random.Generator, n_in: int, hidden: int):
    w = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(n_in + hidden, 4 * hidden))
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0  # forget gate
    return w, b


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int = 0):
    """Right-pad id sequences; returns ``(ids (B, S), mask (B, S))``."""
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), width))
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = 1.0
    return ids, mask


@dataclass
class DecoderState:
    values: np.ndarray     # encoder outputs (rows, S, 2H)
    keys: np.ndarray       # projected encoder outputs (rows, S, A)
    mask_bias: np.ndarray  # 0 on real positions, large negative on padding
    h: np.ndarray
    c: np.ndarray

    def select(self, rows) -> "DecoderState":
        return DecoderState(self.values[rows], self.keys[rows], self.mask_bias[rows], self.h[rows], self.c[rows])


class Seq2SeqPolicy:
    """The generator policy; parameters live in ``self.params`` by name."""

    def __init__(self, config: GeneratorConfig, seed: int = 0, params: dict | None = None):
        self.config = config
        self.trace: list | None = None  # when a list, decoder inputs are appended per step
        if params is not None:
            self.params = params
            return
        rng = np.random.default_rng(seed)
        c = config
        u = lambda *shape: rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)
        p = {"emb": u(c.vocab_size, c.emb_dim)}
        n_in = c.emb_dim
        for layer in range(c.enc_layers):
            for d in ("fwd", "bwd"):
                p[f"enc.{layer}.{d}.W"], p[f"enc.{layer}.{d}.b"] = init_lstm(rng, n_in, c.hidden)
            n_in = 2 * c.hidden
        p["bridge.W"] = u(2 * c.hidden, c.dec_hidden)
        p["bridge.b"] = np.zeros(c.dec_hidden)
        p["attn.Wk"] = u(2 * c.hidden, c.attn_dim)
        p["attn.bk"] = np.zeros(c.attn_dim)
        p["attn.Wq"] = u(c.dec_hidden, c.attn_dim)
        p["attn.v"] = u(c.attn_dim, 1)
        p["dec.W"], p["dec.b"] = init_lstm(rng, c.emb_dim + 2 * c.hidden, c.dec_hidden)
        p["out.W"] = u(c.dec_hidden + 2 * c.hidden, c.vocab_size)
        p["out.b"] = np.zeros(c.vocab_size)
        self.params = {name: ad.Parameter(arr, name=name) for name, arr in p.items()}

    # -------------------------------------------------------------- plumbing

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    @property
    def start_id(self) -> int:
        return self.config.start_id

    @property
    def end_id(self) -> int:
        return self.config.end_id

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def copy(self) -> "Seq2SeqPolicy":
        params = {n: ad.Parameter(t.data, name=n, dtype=t.data.dtype) for n, t in self.params.items()}
        return Seq2SeqPolicy(copy.deepcopy(self.config), params=params)

    def load_arrays(self, arrays: dict) -> None:
        for name, t in self.params.items():
            t.data = np.array(arrays[name], dtype=t.data.dtype)

    def arrays(self) -> dict:
        return {n: t.data for n, t in self.params.items()}

    def astype(self, dtype) -> "Seq2SeqPolicy":
        for t in self.params.values():
            t.data = t.data.astype(dtype)
        return self

    def _ban_mask(self, dtype) -> np.ndarray:
        mask = np.zeros(self.config.vocab_size, dtype=dtype)
        mask[list(self.config.banned_ids)] = NEG_INF_LOGIT
        return mask

    # ------------------------------------------------------------- forward

    def encode(self, src_ids: np.ndarray, src_mask: np.ndarray, rng=None):
        """Returns ``(values, keys, mask_bias, h0, c0)``."""
        P, c = self.params, self.config
        dtype = P["emb"].data.dtype
        mask = src_mask if not src_mask.all() else None
        layer_in = [ad.dropout(ad.embedding(P["emb"], src_ids[:, t]), c.dropout, rng)
                    for t in range(src_ids.shape[1])]
        for layer in range(c.enc_layers):
            layer_in, h_last, b_first = ad.bilstm_encode(
                layer_in,
                (P[f"enc.{layer}.fwd.W"], P[f"enc.{layer}.fwd.b"]),
                (P[f"enc.{layer}.bwd.W"], P[f"enc.{layer}.bwd.b"]),
                c.hidden, mask)
        values = ad.stack(layer_in, axis=1)
        keys = ad.add(ad.matmul(values, P["attn.Wk"]), P["attn.bk"])
        final = ad.concat([h_last, b_first], axis=-1)
        h0 = ad.tanh(ad.add(ad.matmul(final, P["bridge.W"]), P["bridge.b"]))
        c0 = Tensor(np.zeros(h0.shape, dtype=dtype))
        mask_bias = ((1.0 - src_mask) * NEG_INF_LOGIT).astype(dtype)
        return values, keys, mask_bias, h0, c0

    def decoder_step(self, values, keys, mask_bias, h, c, prev_tokens, rng=None):
        """One decoder step; returns ``(features, h, c)`` with features = [h; context]."""
        P = self.params
        if self.trace is not None:
            self.trace.append(np.array(prev_tokens, copy=True))
        ctx, _ = ad.additive_attention(h, keys, values, P["attn.Wq"], P["attn.v"], mask_bias)
        emb = ad.dropout(ad.embedding(P["emb"], prev_tokens), self.config.dropout, rng)
        h, c = ad.lstm_step(ad.concat([emb, ctx], axis=-1), h, c, P["dec.W"], P["dec.b"])
        return ad.concat([h, ctx], axis=-1), h, c

    def logits(self, features: Tensor) -> Tensor:
        P = self.params
        return ad.add(ad.add(ad.matmul(features, P["out.W"]), P["out.b"]), self._ban_mask(P["out.W"].data.dtype))

    def _teacher_forced_logits(self, sources, targets, rng=None):
        """Logits for every target position, flattened to ``(B * T, V)``."""
        src_ids, src_mask = pad_batch(sources)
        tgt_ids, tgt_mask = pad_batch(targets)
        values, keys, mask_bias, h, c = self.encode(src_ids, src_mask, rng)
        prev = np.full(len(targets), self.start_id, dtype=np.int64)
        feats = []
        for t in range(tgt_ids.shape[1]):
            f, h, c = self.decoder_step(values, keys, mask_bias, h, c, prev, rng)
            feats.append(f)
            prev = tgt_ids[:, t]
        stacked = ad.reshape(ad.stack(feats, axis=1), (len(targets) * tgt_ids.shape[1], -1))
        return self.logits(stacked), tgt_ids.reshape(-1), tgt_mask.reshape(-1)

    def loss(self, sources, targets, rng=None) -> Tensor:
        """Token-averaged categorical cross-entropy under teacher forcing."""
        logits, tgt, mask = self._teacher_forced_logits(sources, targets, rng)
        loss, _ = ad.softmax_cross_entropy(logits, tgt, mask)
        return loss

    def sequence_log_prob(self, sources, sequences) -> Tensor:
        """``log G(y | source)`` for each row, differentiable; shape ``(N,)``."""
        if any(len(y) == 0 for y in sequences):
            raise ValueError("cannot score an empty sequence")
        logits, tgt, mask = self._teacher_forced_logits(sources, sequences)
        n, width = len(sequences), max(len(y) for y in sequences)
        per_token = ad.reshape(ad.log_prob_of(logits, tgt), (n, width))
        return ad.tensor_sum(ad.mul(per_token, mask.reshape(n, width).astype(logits.data.dtype)), axis=1)

    # -------------------------------------------------- step-policy protocol

    def start(self, sources) -> DecoderState:
        with ad.no_grad():
            src_ids, src_mask = pad_batch(sources)
            values, keys, mask_bias, h, c = self.encode(src_ids, src_mask)
        return DecoderState(values.data, keys.data, mask_bias, h.data, c.data)

    def step(self, state: DecoderState, prev_tokens):
        with ad.no_grad():
            f, h, c = self.decoder_step(Tensor(state.values), Tensor(state.keys), state.mask_bias,
                                        Tensor(state.h), Tensor(state.c), np.asarray(prev_tokens))
            logits = self.logits(f).data.astype(np.float64)
        logp = logits - logits.max(axis=1, keepdims=True)
        logp -= np.log(np.exp(logp).sum(axis=1, keepdims=True))
        logp[:, list(self.config.banned_ids)] = -np.inf
        return logp, DecoderState(state.values, state.keys, state.mask_bias, h.data, c.data)

    def select(self, state: DecoderState, rows) -> DecoderState:
        return state.select(rows)


# --------------------------------------------------------------- training

@dataclass
class PretrainConfig:
    epochs: int = 4
    batch_size: int = 64
    lr: float = 2e-3
    t_max: int = 8
    seed: int = 0
    max_steps: int | None = None
    eval_every: int | None = None  # steps; default once per epoch
    log_every: int = 100


@dataclass
class PretrainResult:
    policy: Seq2SeqPolicy
    best_valid_loss: float
    final_valid_loss: float
    history: list = field(default_factory=list)
    optimizer: Adam | None = None


def encode_pairs(pairs: Sequence[QueryPair], vocab: Vocabulary, t_max: int = 8):
    src = [encode(p.q_i, vocab, t_max) for p in pairs]
    tgt = [encode(p.q_next, vocab, t_max, add_end=True) for p in pairs]
    return src, tgt


def batch_loss(policy: Seq2SeqPolicy, src, tgt, batch_size: int = 256) -> float:
    """Token-averaged cross-entropy over a dataset without dropout."""
    total, count = 0.0, 0
    with ad.no_grad():
        for i in range(0, len(src), batch_size):
            s, t = src[i:i + batch_size], tgt[i:i + batch_size]
            n_tok = sum(len(x) for x in t)
            total += float(policy.loss(s, t).data) * n_tok
            count += n_tok
    return total / max(count, 1)


def train_step(policy: Seq2SeqPolicy, optimizer, src, tgt, rng=None) -> float:
    with Tape() as tape:
        loss = policy.loss(src, tgt, rng)
    if not np.isfinite(loss.data):
        raise ad.NonFiniteError("non-finite training loss")
    params = policy.parameters()
    grads = tape.backward(loss, params)
    optimizer.step(grads)
    return float(loss.data)


def pretrain_supervised(policy: Seq2SeqPolicy, train: tuple, valid: tuple, config: PretrainConfig) -> PretrainResult:
    """Teacher-forced MLE training with Adam, keeping the best-validation weights.

    ``train`` and ``valid`` are ``(sources, targets)`` id lists (targets end
    with <END>).
    """
    src, tgt = train
    rng = np.random.default_rng(config.seed)
    optimizer = Adam(policy.parameters(), lr=config.lr)
    steps_per_epoch = max(1, (len(src) + config.batch_size - 1) // config.batch_size)
    eval_every = config.eval_every or steps_per_epoch
    best = (float("inf"), policy.copy())
    history, step, last_valid = [], 0, float("nan")
    done = False
    for epoch in range(config.epochs):
        order = rng.permutation(len(src))
        for i in range(0, len(src), config.batch_size):
            idx = order[i:i + config.batch_size]
            loss = train_step(policy, optimizer, [src[j] for j in idx], [tgt[j] for j in idx], rng)
            step += 1
            if step % config.log_every == 0:
                log.info("pretrain step %d loss %.4f", step, loss)
            history.append({"step": step, "epoch": epoch, "train_loss": loss})
            if valid is not None and step % eval_every == 0:
                last_valid = batch_loss(policy, *valid)
                history[-1]["valid_loss"] = last_valid
                log.info("pretrain step %d valid loss %.4f", step, last_valid)
                if last_valid < best[0]:
                    best = (last_valid, policy.copy())
            if config.max_steps is not None and step >= config.max_steps:
                done = True
                break
        if done:
            break
    if valid is None:
        return PretrainResult(policy, float("nan"), float("nan"), history, optimizer)
    if "valid_loss" not in history[-1]:
        last_valid = batch_loss(policy, *valid)
        history[-1]["valid_loss"] = last_valid
        if last_valid < best[0]:
            best = (last_valid, policy.copy())
    return PretrainResult(best[1], best[0], last_valid, history, optimizer)


# ------------------------------------------------------------- inference

N_SUGGESTIONS = 6


def suggest(policy: Seq2SeqPolicy, vocab: Vocabulary, queries: Sequence[str], n: int = N_SUGGESTIONS,
            t_max: int = 8, max_len: int | None = None, batch_size: int = 64) -> list[list[str]]:
    """Beam-search ``n`` distinct suggestion strings per query."""
    max_len = max_len or t_max
    out = []
    for i in range(0, len(queries), batch_size):
        chunk = queries[i:i + batch_size]
        sources = [encode(q, vocab, t_max) for q in chunk]
        for hyps in beam_search_batch(policy, sources, n, max_len):
            seen, texts = set(), []
            for h in hyps:
                text = decode(h.tokens, vocab)
                if text and text not in seen:
                    seen.add(text)
                    texts.append(text)
            out.append(texts)
    return out


def rollout(policy, sources, k: int, max_len: int, strategy: str, rng=None,
            counter: StepCounter | None = None) -> list[list[tuple]]:
    """``k`` complete sequences per source, generated from the start state only."""
    if strategy == "beam":
        hyps = beam_search_batch(policy, sources, k, max_len, counter)
    elif strategy == "categorical":
        hyps = sample_categorical(policy, sources, k, max_len, rng, counter=counter)
    else:
        raise ValueError(f"unknown sampling strategy {strategy!r}")
    return [[h.tokens for h in per_src] for per_src in hyps]


def config_dict(config: GeneratorConfig) -> dict:
    d = asdict(config)
    d["banned_ids"] = list(d["banned_ids"])
    return d


def config_from_dict(d: dict) -> GeneratorConfig:
    d = dict(d)
    d["banned_ids"] = tuple(d["banned_ids"])
    return GeneratorConfig(**d)


def default_config(vocab: Vocabulary, **overrides) -> GeneratorConfig:
    return GeneratorConfig(vocab_size=len(vocab), start_id=vocab.start_id, end_id=vocab.end_id,
                           banned_ids=(vocab.pad_id, vocab.start_id, vocab.sep_id), **overrides)

