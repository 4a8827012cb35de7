"""Query logs, search sessions, query pairs and the vocabulary."""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, START, END, SEP = "<PAD>", "<UNK>", "<START>", "<END>", "<SEP>"
RESERVED = (PAD, UNK, START, END, SEP)
_RESERVED_LOWER = {t.lower(): t for t in RESERVED}
DEFAULT_WINDOW = 300
DEFAULT_T_MAX = 8


class DataError(ValueError):
    """Malformed or inconsistent input data."""


def tokenize(text: str) -> list[str]:
    """Lower-cased whitespace tokens; reserved markers keep their spelling."""
    return [_RESERVED_LOWER.get(t, t) for t in text.lower().split()]


@dataclass(frozen=True)
class QueryEvent:
    user: str
    timestamp: int
    query: str
    engaged: int = 0


@dataclass
class SearchSession:
    events: list[QueryEvent]

    @property
    def queries(self) -> list[str]:
        return [e.query for e in self.events]

    def __len__(self) -> int:
        return len(self.events)


@dataclass(frozen=True)
class QueryPair:
    q_i: str
    q_next: str
    u_plus: int = 0
    position: int | None = None  # index of q_next inside its session


def segment_sessions(events: Iterable[QueryEvent], window_seconds: float = DEFAULT_WINDOW) -> list[SearchSession]:
    """Split each user's query stream wherever the gap exceeds the window.

    Sessions are returned grouped by user (in order of first appearance) and
    in time order within a user.
    """
    by_user: dict[str, list[QueryEvent]] = defaultdict(list)
    for ev in events:
        if isinstance(ev.timestamp, bool) or not isinstance(ev.timestamp, (int, float)) \
                or not math.isfinite(ev.timestamp):
            raise DataError(f"malformed timestamp {ev.timestamp!r} for user {ev.user!r}")
        by_user[ev.user].append(ev)
    sessions = []
    for user_events in by_user.values():
        user_events.sort(key=lambda e: e.timestamp)  # stable: ties keep input order
        current = [user_events[0]]
        for prev, ev in zip(user_events, user_events[1:]):
            if ev.timestamp - prev.timestamp > window_seconds:
                sessions.append(SearchSession(current))
                current = []
            current.append(ev)
        sessions.append(SearchSession(current))
    return sessions


def label_feedback(pair: QueryPair, session: SearchSession) -> int:
    """1 if any event from ``q_next`` onward in the session is engaged."""
    pos = pair.position
    if pos is None:
        queries = session.queries
        candidates = [j for j in range(1, len(queries))
                      if queries[j - 1] == pair.q_i and queries[j] == pair.q_next]
        if not candidates:
            raise DataError(f"pair ({pair.q_i!r}, {pair.q_next!r}) not found in session")
        pos = candidates[0]
    elif not (0 < pos < len(session)) or session.events[pos].query != pair.q_next \
            or session.events[pos - 1].query != pair.q_i:
        raise DataError(f"pair ({pair.q_i!r}, {pair.q_next!r}) not found in session at {pos}")
    return int(any(e.engaged for e in session.events[pos:]))


def extract_pairs(session: SearchSession) -> list[QueryPair]:
    """All N-1 consecutive pairs, unfiltered, labelled with session feedback."""
    events = session.events
    # suffix OR of engagement so labelling is linear in session length
    downstream = [0] * (len(events) + 1)
    for j in range(len(events) - 1, -1, -1):
        downstream[j] = int(bool(events[j].engaged) or downstream[j + 1])
    return [QueryPair(events[j - 1].query, events[j].query, downstream[j], j)
            for j in range(1, len(events))]


class Vocabulary:
    """Token/id mapping with unigram priors over the kept tokens."""

    def __init__(self, counts: dict[str, int], oov_count: int = 0):
        ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        self.itos: list[str] = list(RESERVED) + [tok for tok, _ in ordered]
        self.stoi: dict[str, int] = {tok: i for i, tok in enumerate(self.itos)}
        self.counts = np.zeros(len(self.itos), dtype=np.int64)
        for tok, n in ordered:
            self.counts[self.stoi[tok]] = n
        self.oov_count = int(oov_count)
        total = int(self.counts.sum())
        self.total = total
        self.prior = self.counts / total if total else np.zeros(len(self.itos))
        self.unk_prior = oov_count / (total + oov_count) if oov_count else 0.0

    pad_id = 0
    unk_id = 1
    start_id = 2
    end_id = 3
    sep_id = 4

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi and self.stoi[token] >= len(RESERVED)

    @property
    def real_ids(self) -> np.ndarray:
        return np.arange(len(RESERVED), len(self.itos))

    def token_prior(self, token: str) -> float:
        if token == UNK or token not in self:
            return self.unk_prior
        return float(self.prior[self.stoi[token]])

    def id(self, token: str) -> int:
        return self.stoi.get(token, self.unk_id)


def build_vocab(corpus: Iterable[str], max_size: int | None = None) -> Vocabulary:
    counts = Counter()
    for text in corpus:
        counts.update(tokenize(text))
    for tok in RESERVED:
        counts.pop(tok, None)
    if not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = ordered if max_size is None else ordered[:max_size]
    oov = sum(n for _, n in ordered[len(kept):])
    return Vocabulary(dict(kept), oov_count=oov)


def encode(text: str, vocab: Vocabulary, t_max: int = DEFAULT_T_MAX, add_end: bool = False) -> list[int]:
    tokens = tokenize(text)
    if not tokens:
        raise DataError("query is empty after tokenization")
    ids = [vocab.id(t) for t in tokens[:t_max]]
    if add_end:
        ids.append(vocab.end_id)
    return ids


def decode(ids: Sequence[int], vocab: Vocabulary) -> str:
    out = []
    for i in ids:
        i = int(i)
        if i == vocab.end_id:
            break
        if i in (vocab.pad_id, vocab.start_id):
            continue
        out.append(vocab.itos[i])
    return " ".join(out)


def split_dataset(pairs: Sequence, fractions=(0.9, 0.05, 0.05), seed: int = 0):
    """Deterministic shuffled split into train / valid / test."""
    if len(fractions) != 3 or any(not (0.0 <= f <= 1.0) for f in fractions):
        raise ValueError(f"fractions out of range: {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    n = len(pairs)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_valid = min(int(round(fractions[1] * n)), n - n_train)
    parts = (order[:n_train], order[n_train:n_train + n_valid], order[n_train + n_valid:])
    return tuple([pairs[i] for i in part] for part in parts)


class FeedbackIndex:
    """Exact-match lookup of logged session feedback.

    ``engaged_pairs`` holds ``(context, next_query)`` pairs whose session shows
    a downstream positive action; ``engaged_queries`` holds every query string
    observed with a downstream positive action from its position onward.
    """

    def __init__(self, engaged_pairs=(), engaged_queries=()):
        self.engaged_pairs = set(engaged_pairs)
        self.engaged_queries = set(engaged_queries)

    @classmethod
    def from_pairs(cls, pairs: Iterable[QueryPair]) -> "FeedbackIndex":
        ep, eq = set(), set()
        for p in pairs:
            if p.u_plus:
                ep.add((p.q_i, p.q_next))
                eq.add(p.q_i)
                eq.add(p.q_next)
        return cls(ep, eq)

    @classmethod
    def from_sessions(cls, sessions: Iterable[SearchSession]) -> "FeedbackIndex":
        ep, eq = set(), set()
        for s in sessions:
            engaged_from = False
            for j in range(len(s.events) - 1, -1, -1):
                engaged_from = engaged_from or bool(s.events[j].engaged)
                if engaged_from:
                    eq.add(s.events[j].query)
                    if j > 0:
                        ep.add((s.events[j - 1].query, s.events[j].query))
        return cls(ep, eq)

    def u_plus(self, context: str, query: str) -> int:
        return int((context, query) in self.engaged_pairs)

    def is_engaged(self, query: str) -> bool:
        return query in self.engaged_queries


# ----------------------------------------------------------------- file I/O

LOG_HEADER = "# user_id\ttimestamp\tquery\tengaged"


def write_log(path, events: Iterable[QueryEvent]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(LOG_HEADER + "\n")
        for e in events:
            fh.write(f"{e.user}\t{int(e.timestamp)}\t{e.query}\t{int(e.engaged)}\n")


def read_log(path) -> list[QueryEvent]:
    events = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            user, ts, query, flag = parts
            try:
                ts_val = int(ts)
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed timestamp {ts!r}") from None
            if flag not in ("0", "1"):
                raise DataError(f"{path}:{lineno}: engagement flag must be 0 or 1, got {flag!r}")
            query = " ".join(tokenize(query))
            if not query:
                raise DataError(f"{path}:{lineno}: empty query")
            events.append(QueryEvent(user, ts_val, query, int(flag)))
    return events


def write_pairs(path, pairs: Iterable[QueryPair]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in pairs:
            fh.write(f"{p.q_i}\t{p.q_next}\t{int(p.u_plus)}\n")


def read_pairs(path) -> list[QueryPair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[2] not in ("0", "1") or not parts[0].strip() or not parts[1].strip():
                raise DataError(f"{path}:{lineno}: malformed pair line")
            pairs.append(QueryPair(parts[0], parts[1], int(parts[2])))
    return pairs


def write_vocab(path, vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# oov_count={vocab.oov_count}\n")
        for i in vocab.real_ids:
            fh.write(f"{vocab.itos[i]}\t{int(vocab.counts[i])}\n")


def read_vocab(path) -> Vocabulary:
    counts, oov = {}, 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if line.startswith("# oov_count="):
                oov = int(line.split("=", 1)[1])
                continue
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: malformed vocab line")
            counts[parts[0]] = int(parts[1])
    if not counts:
        raise DataError(f"{path}: empty vocabulary")
    return Vocabulary(counts, oov_count=oov)


# ------------------------------------------------------------ synthetic logs

_ONSETS = ["b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z",
           "br", "cr", "dr", "gr", "pl", "st", "tr", "sh", "ch"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ea", "io", "ou"]
_CODAS = ["", "n", "r", "s", "l", "x", "m", "nd", "rt", "st"]

MODIFIERS = [
    "jobs", "salary", "remote", "intern", "senior", "junior", "manager", "engineer", "director",
    "analyst", "consultant", "careers", "hiring", "part", "time", "contract", "entry", "level",
    "lead", "assistant", "specialist", "startup", "company", "group", "news", "course",
    "certification", "skills", "training", "freelance", "near", "me", "openings", "roles",
    "team", "head", "of", "vp", "principal", "staff",
]


@dataclass
class SynthConfig:
    n_users: int = 2500
    sessions_per_user: tuple = (4, 10)
    queries_per_session: tuple = (2, 6)
    n_topics: int = 400
    n_topic_words: int = 700
    n_tail_words: int = 2400
    related_prob: float = 0.75
    same_query_prob: float = 0.0
    repeat_word_prob: float = 0.01
    tail_word_prob: float = 0.12
    base_engagement: float = 0.06
    related_engagement_bonus: float = 0.16
    max_query_len: int = DEFAULT_T_MAX
    extra: dict = field(default_factory=dict)

    def validate(self) -> None:
        lo, hi = self.sessions_per_user
        qlo, qhi = self.queries_per_session
        if self.n_users < 0 or lo < 0 or hi < lo or qlo < 1 or qhi < qlo:
            raise ValueError("invalid session counts in synth config")
        for name in ("related_prob", "same_query_prob", "repeat_word_prob", "tail_word_prob",
                     "base_engagement", "related_engagement_bonus"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.same_query_prob > self.related_prob:
            raise ValueError("same_query_prob cannot exceed related_prob")
        if self.n_users > 0 and (self.n_topics < 1 or self.n_topic_words < 1):
            raise ValueError("need at least one topic and topic word")
        if self.max_query_len < 2:
            raise ValueError("max_query_len must be at least 2")


def _pseudo_words(rng: np.random.Generator, n: int, taken: set) -> list[str]:
    words = []
    while len(words) < n:
        syl = rng.integers(2, 4)
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    + _CODAS[rng.integers(len(_CODAS))] for _ in range(syl))
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


class _World:
    """Shared lexicon and topic structure, derived from the seed alone."""

    def __init__(self, cfg: SynthConfig, seed: int):
        rng = np.random.default_rng([seed, 0])
        taken = set(MODIFIERS)
        self.topic_words = _pseudo_words(rng, cfg.n_topic_words, taken)
        self.tail_words = _pseudo_words(rng, cfg.n_tail_words, taken)
        self.topics = []
        for _ in range(cfg.n_topics):
            k = 1 if rng.random() < 0.5 else 2
            self.topics.append(list(rng.choice(self.topic_words, size=k, replace=False)))
        pop = 1.0 / np.arange(1, cfg.n_topics + 1) ** 0.8
        self.topic_cdf = np.cumsum(pop / pop.sum())
        # each topic has a few favoured modifiers; each modifier an engagement multiplier
        self.topic_mods = [list(rng.choice(len(MODIFIERS), size=6, replace=False)) for _ in range(cfg.n_topics)]
        self.mod_quality = rng.uniform(0.4, 2.0, size=len(MODIFIERS))
        # long-tail words are niche vocabulary bound to a single topic
        self.topic_tails = [self.tail_words[t::cfg.n_topics] for t in range(cfg.n_topics)]
        self.tail_cdfs = []
        for words in self.topic_tails:
            w = 1.0 / np.arange(1, len(words) + 1) ** 0.9
            self.tail_cdfs.append(np.cumsum(w / w.sum()) if len(words) else w)

    @staticmethod
    def draw(rng: np.random.Generator, cdf: np.ndarray) -> int:
        return min(int(np.searchsorted(cdf, rng.random(), side="right")), len(cdf) - 1)

    def make_query(self, cfg: SynthConfig, rng: np.random.Generator, topic: int,
                   anchor: str | None = None) -> tuple[list[str], float]:
        """Build one query on ``topic``; ``anchor`` is a topic word it must keep."""
        words = list(self.topics[topic])
        if len(words) > 1 and rng.random() < 0.2:
            words = [anchor if anchor is not None else words[rng.integers(len(words))]]
        mods = self.topic_mods[topic]
        n_mod = rng.choice([0, 1, 1, 2])
        chosen = [mods[i] for i in rng.choice(len(mods), size=n_mod, replace=False)]
        quality = float(np.mean([self.mod_quality[m] for m in chosen])) if chosen else 0.8
        tokens = words + [MODIFIERS[m] for m in chosen]
        tails = self.topic_tails[topic]
        if tails and rng.random() < cfg.tail_word_prob:
            tokens.insert(rng.integers(len(tokens) + 1), tails[self.draw(rng, self.tail_cdfs[topic])])
        if rng.random() < cfg.repeat_word_prob:
            j = rng.integers(len(tokens))
            tokens.insert(j, tokens[j])
        return tokens[:cfg.max_query_len], quality


def synthesize_logs(config: SynthConfig, seed: int = 0) -> list[QueryEvent]:
    """Generate a query log with planted topical and engagement structure.

    Within a session, each next query stays on the current topic with
    probability ``related_prob`` (always sharing a topic word), and engagement
    is more likely on queries that follow a related query.
    """
    config.validate()
    if config.n_users == 0:
        return []
    world = _World(config, seed)
    streams = np.random.SeedSequence([seed, 1]).spawn(config.n_users)
    events = []
    for u, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        user = f"u{u:06d}"
        t = 1_600_000_000 + int(rng.integers(0, 86_400))
        lo, hi = config.sessions_per_user
        for _ in range(int(rng.integers(lo, hi + 1))):
            qlo, qhi = config.queries_per_session
            n_q = int(rng.integers(qlo, qhi + 1))
            topic = world.draw(rng, world.topic_cdf)
            tokens, quality = world.make_query(config, rng, topic)
            related = False
            for k in range(n_q):
                if k > 0:
                    r = rng.random()
                    if r < config.same_query_prob:
                        related = True
                    elif r < config.related_prob:
                        kept = [w for w in world.topics[topic] if w in tokens]
                        anchor = kept[rng.integers(len(kept))]
                        tokens, quality = world.make_query(config, rng, topic, anchor)
                        related = True
                    else:
                        topic = world.draw(rng, world.topic_cdf)
                        tokens, quality = world.make_query(config, rng, topic)
                        related = False
                    t += int(rng.integers(5, 241))
                p = (config.base_engagement + config.related_engagement_bonus * related) * quality
                engaged = int(rng.random() < min(p, 0.95))
                events.append(QueryEvent(user, t, " ".join(tokens), engaged))
            t += int(rng.integers(600, 86_400))
    return events
