"""Contextual naturalness estimator and its negative-example generators."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .corpus import UNK, DataError, QueryPair, Vocabulary, decode, encode, tokenize
from .decoding import sample_categorical
from .generator import init_lstm, pad_batch
from .optim import Adam

log = logging.getLogger(__name__)

NEGATIVE_METHODS = ("sampled", "duplicate", "unk", "repeat")
MAX_REDRAWS = 20


@dataclass(frozen=True)
class LabeledExample:
    context: str
    candidate: str
    label: int
    method: str = "positive"


def duplicate_word(tokens: Sequence[str], rng: np.random.Generator) -> list[str]:
    """Insert a copy of a randomly chosen word at a random position."""
    if not tokens:
        raise ValueError("cannot perturb an empty query")
    word = tokens[rng.integers(len(tokens))]
    out = list(tokens)
    out.insert(int(rng.integers(len(tokens) + 1)), word)
    return out


def replace_with_unk(tokens: Sequence[str], rng: np.random.Generator) -> list[str]:
    if not tokens:
        raise ValueError("cannot perturb an empty query")
    out = list(tokens)
    out[rng.integers(len(tokens))] = UNK
    return out


def repeat_prior_word(vocab: Vocabulary, rng: np.random.Generator, t_max: int) -> list[str]:
    """One word drawn from the unigram prior, repeated r ~ U{1..t_max-1} times."""
    ids = vocab.real_ids
    cdf = np.cumsum(vocab.prior[ids])
    j = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), len(ids) - 1)
    r = int(rng.integers(1, t_max))
    return [vocab.itos[ids[j]]] * r


def gen_negatives_batch(pairs: Sequence[QueryPair], policy, vocab: Vocabulary, rng: np.random.Generator,
                        t_max: int = 8) -> list[list[LabeledExample]]:
    """Four unnatural candidates per pair, one from each generation method.

    A candidate that happens to equal the real next query is redrawn.
    """
    for p in pairs:
        if not tokenize(p.q_next):
            raise ValueError("q_next is empty")
    sources = [encode(p.q_i, vocab, t_max) for p in pairs]
    sampled = [None] * len(pairs)
    pending = list(range(len(pairs)))
    for _ in range(MAX_REDRAWS):
        if not pending:
            break
        hyps = sample_categorical(policy, [sources[i] for i in pending], 1, t_max, rng)
        still = []
        for i, h in zip(pending, hyps):
            text = decode(h[0].tokens, vocab)
            if text and text != pairs[i].q_next:
                sampled[i] = text
            else:
                still.append(i)
        pending = still

    out = []
    for i, p in enumerate(pairs):
        toks = tokenize(p.q_next)
        if sampled[i] is None:
            sampled[i] = " ".join(duplicate_word(toks, rng))
        candidates = {"sampled": sampled[i], "duplicate": " ".join(duplicate_word(toks, rng))}
        for method, make in (("unk", lambda: replace_with_unk(toks, rng)),
                             ("repeat", lambda: repeat_prior_word(vocab, rng, t_max))):
            text = " ".join(make())
            tries = 1
            while text == p.q_next and tries < MAX_REDRAWS:
                text = " ".join(make())
                tries += 1
            if text == p.q_next:
                text = " ".join(duplicate_word(toks, rng))
            candidates[method] = text
        out.append([LabeledExample(p.q_i, candidates[m], 0, m) for m in NEGATIVE_METHODS])
    return out


def gen_negatives(pair: QueryPair, policy, vocab: Vocabulary, rng: np.random.Generator,
                  t_max: int = 8) -> list[LabeledExample]:
    return gen_negatives_batch([pair], policy, vocab, rng, t_max)[0]


def build_examples(pairs: Sequence[QueryPair], policy, vocab: Vocabulary, rng: np.random.Generator,
                   t_max: int = 8, batch_size: int = 512) -> list[LabeledExample]:
    """Each pair yields its positive followed by its four negatives."""
    out = []
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i:i + batch_size]
        for p, negs in zip(chunk, gen_negatives_batch(chunk, policy, vocab, rng, t_max)):
            out.append(LabeledExample(p.q_i, p.q_next, 1))
            out.extend(negs)
    return out


def write_examples(path, examples: Sequence[LabeledExample]) -> None:
    """Tab-separated context, candidate, label."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in examples:
            fh.write(f"{e.context}\t{e.candidate}\t{e.label}\n")


def read_examples(path) -> list[LabeledExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[2] not in ("0", "1") or not tokenize(parts[1]):
                raise DataError(f"{path}:{lineno}: malformed example line")
            out.append(LabeledExample(parts[0], parts[1], int(parts[2]), "positive" if parts[2] == "1" else "file"))
    return out


# ------------------------------------------------------------------- model

@dataclass
class EstimatorConfig:
    vocab_size: int
    emb_dim: int = 48
    hidden: int = 64
    layers: int = 2
    dropout: float = 0.0
    t_max: int = 8
    sep_id: int = 4


class NaturalnessEstimator:
    """Embedding, stacked BiLSTM, logistic head on the final time-step state."""

    def __init__(self, config: EstimatorConfig, seed: int = 0, params: dict | None = None):
        self.config = config
        if params is not None:
            self.params = params
            return
        rng = np.random.default_rng(seed)
        c = config
        p = {"emb": rng.uniform(-0.08, 0.08, size=(c.vocab_size, c.emb_dim))}
        n_in = c.emb_dim
        for layer in range(c.layers):
            for d in ("fwd", "bwd"):
                p[f"enc.{layer}.{d}.W"], p[f"enc.{layer}.{d}.b"] = init_lstm(rng, n_in, c.hidden)
            n_in = 2 * c.hidden
        p["head.W"] = rng.uniform(-0.08, 0.08, size=(2 * c.hidden, 1))
        p["head.b"] = np.zeros(1)
        self.params = {n: ad.Parameter(a, name=n) for n, a in p.items()}

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def arrays(self) -> dict:
        return {n: t.data for n, t in self.params.items()}

    def load_arrays(self, arrays: dict) -> None:
        for n, t in self.params.items():
            t.data = np.array(arrays[n], dtype=t.data.dtype)

    def copy(self) -> "NaturalnessEstimator":
        return NaturalnessEstimator(self.config, params={n: ad.Parameter(t.data, name=n, dtype=t.data.dtype)
                                                         for n, t in self.params.items()})

    def encode_example(self, vocab: Vocabulary, context: str, candidate: str) -> list[int]:
        cand = tokenize(candidate)
        if not cand:
            raise ValueError("empty candidate")
        ctx = [vocab.id(t) for t in tokenize(context)[:self.config.t_max]]
        return ctx + [self.config.sep_id] + [vocab.id(t) for t in cand[:self.config.t_max + 1]]

    def logits(self, ids: np.ndarray, mask: np.ndarray, rng=None) -> Tensor:
        P, c = self.params, self.config
        m = None if mask.all() else mask
        seq = [ad.dropout(ad.embedding(P["emb"], ids[:, t]), c.dropout, rng) for t in range(ids.shape[1])]
        for layer in range(c.layers):
            seq, h_last, b_first = ad.bilstm_encode(
                seq, (P[f"enc.{layer}.fwd.W"], P[f"enc.{layer}.fwd.b"]),
                (P[f"enc.{layer}.bwd.W"], P[f"enc.{layer}.bwd.b"]), c.hidden, m)
        final = ad.concat([h_last, b_first], axis=-1)
        return ad.reshape(ad.add(ad.matmul(final, P["head.W"]), P["head.b"]), (ids.shape[0],))

    def predict_ids(self, seqs: Sequence[Sequence[int]], batch_size: int = 512) -> np.ndarray:
        out = []
        with ad.no_grad():
            for i in range(0, len(seqs), batch_size):
                ids, mask = pad_batch(seqs[i:i + batch_size])
                z = self.logits(ids, mask).data.astype(np.float64)
                out.append(ad._sigmoid(z))
        return np.concatenate(out) if out else np.zeros(0)

    def predict(self, vocab: Vocabulary, contexts: Sequence[str], candidates: Sequence[str]) -> np.ndarray:
        seqs = [self.encode_example(vocab, q, y) for q, y in zip(contexts, candidates)]
        return self.predict_ids(seqs)


def naturalness(model: NaturalnessEstimator, vocab: Vocabulary, q_i: str, candidate: str) -> float:
    """Estimated probability that ``candidate`` is a real follow-up to ``q_i``."""
    return float(model.predict(vocab, [q_i], [candidate])[0])


# ---------------------------------------------------------------- training

@dataclass
class EstimatorTrainConfig:
    epochs: int = 4
    batch_size: int = 128
    lr: float = 2e-3
    seed: int = 0
    threshold: float | None = None  # None: chosen on validation each epoch


@dataclass
class EstimatorResult:
    model: NaturalnessEstimator
    best_valid: dict
    history: list = field(default_factory=list)

    @property
    def threshold(self) -> float:
        return self.best_valid["threshold"]


def classification_report(probs: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> dict:
    pred = (np.asarray(probs) >= threshold).astype(int)
    labels = np.asarray(labels).astype(int)
    tp = int(((pred == 1) & (labels == 1)).sum())
    fp = int(((pred == 1) & (labels == 0)).sum())
    fn = int(((pred == 0) & (labels == 1)).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"accuracy": float((pred == labels).mean()) if labels.size else 0.0,
            "precision": precision, "recall": recall, "f1": f1}


def best_threshold(probs: np.ndarray, labels: np.ndarray) -> float:
    """Decision threshold in [0.05, 0.95] with the highest F1; ties go to the value closest to 0.5."""
    grid = np.round(np.arange(0.05, 0.951, 0.01), 2)
    return float(max(grid, key=lambda t: (classification_report(probs, labels, t)["f1"], -abs(t - 0.5))))


def train_estimator(model: NaturalnessEstimator, vocab: Vocabulary, train: Sequence[LabeledExample],
                    valid: Sequence[LabeledExample], config: EstimatorTrainConfig) -> EstimatorResult:
    """Binary cross-entropy training; keeps the weights with best validation F1.

    Unless ``config.threshold`` is fixed, each epoch's decision threshold is
    the one maximising validation F1, and it is reported with the metrics.
    """
    labels = np.array([e.label for e in train])
    if labels.size == 0 or labels.min() == labels.max():
        raise ValueError("estimator training data must contain both classes")
    seqs = [model.encode_example(vocab, e.context, e.candidate) for e in train]
    v_seqs = [model.encode_example(vocab, e.context, e.candidate) for e in valid]
    v_labels = np.array([e.label for e in valid])
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.parameters(), lr=config.lr)
    best = ({"f1": -1.0}, model.copy())
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(seqs))
        losses = []
        for i in range(0, len(seqs), config.batch_size):
            idx = order[i:i + config.batch_size]
            ids, mask = pad_batch([seqs[j] for j in idx])
            with Tape() as tape:
                loss = ad.bce_with_logits(model.logits(ids, mask, rng), labels[idx])
            opt.step(tape.backward(loss, model.parameters()))
            losses.append(float(loss.data))
        probs = model.predict_ids(v_seqs)
        threshold = config.threshold if config.threshold is not None else best_threshold(probs, v_labels)
        report = classification_report(probs, v_labels, threshold)
        report.update(epoch=epoch, train_loss=float(np.mean(losses)), threshold=threshold)
        history.append(report)
        log.info("estimator epoch %d loss %.4f valid f1 %.4f acc %.4f at threshold %.2f", epoch,
                 report["train_loss"], report["f1"], report["accuracy"], threshold)
        if report["f1"] > best[0]["f1"]:
            best = (report, model.copy())
    return EstimatorResult(best[1], best[0], history)


def config_dict(config: EstimatorConfig) -> dict:
    return asdict(config)
