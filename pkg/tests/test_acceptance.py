"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is repeated in the terminal summary.
Criteria 6 and 7 share one desk-scale pipeline run (see ``desk``).
"""

import itertools
import time
from collections import Counter
from types import SimpleNamespace

import numpy as np
import pytest

from querydrl import autodiff as ad
from querydrl.autodiff import Tape
from querydrl.cli import main
from querydrl.config import RunConfig, apply_overrides
from querydrl.corpus import (UNK, FeedbackIndex, QueryPair, SynthConfig, Vocabulary, build_vocab, synthesize_logs,
                             tokenize)
from querydrl.decoding import StepCounter, beam_search, beam_search_batch, greedy_decode
from querydrl.estimator import build_examples, classification_report, gen_negatives_batch, repeat_prior_word
from querydrl.generator import GeneratorConfig, Seq2SeqPolicy, default_config, encode_pairs, rollout, train_step
from querydrl.metrics import mean_with_ci, precision_at6, prior_sentence_prob, repetitions_s, unique_at6
from querydrl.optim import SGD, Adam
from querydrl.pipeline import (estimator_examples, estimator_stage, evaluate_policy, finetune_stage, load_generator,
                               prepare_corpus, pretrain_stage, restore_optimizer, save_generator)
from querydrl.reinforce import mean_sampled_reward, policy_gradient_step
from querydrl.reward import RewardModel, rouge1

from oracles import (TablePolicy, all_gradcheck_instances, exhaustive_top_k, precision_oracle, prior_prob_oracle,
                     repetitions_oracle, rouge1_oracle, t_interval_oracle, unique_oracle)

pytestmark = pytest.mark.acceptance


def test_c1_gradient_correctness(acceptance):
    start = time.perf_counter()
    cases = all_gradcheck_instances(4, seed=2024)
    worst, failed = 0.0, []
    with ad.precision(np.float64):
        for label, build, params in cases:
            for p in params:
                p.data = p.data.astype(np.float64)
            err = ad.gradient_check(build, params, eps=1e-5)
            worst = max(worst, err)
            if not err <= 1e-4:
                failed.append(label)
    elapsed = time.perf_counter() - start
    labels = {c[0] for c in cases}
    ok = not failed and len(cases) >= 100 and elapsed < 120 and {"seq2seq_loss", "estimator_loss"} <= labels
    acceptance(1, ok, f"{len(cases)} instances over {len(labels)} ops, worst rel err {worst:.2e}, {elapsed:.1f}s")
    assert ok, failed


def _toy_policy(seed):
    cfg = GeneratorConfig(vocab_size=6, emb_dim=3, hidden=2, dec_hidden=3, attn_dim=2, dropout=0.0,
                          banned_ids=(0, 1, 2, 4))
    with ad.precision(np.float64):
        return Seq2SeqPolicy(cfg, seed=seed).astype(np.float64)


def test_c2_reinforce_estimator(acceptance):
    worst = 0.0
    tokens = (3, 5)  # the two generatable ids: <END> and one word
    with ad.precision(np.float64):
        for seed, k in itertools.product(range(3), (1, 2, 3)):
            policy = _toy_policy(seed)
            reward = {3: 0.25 + 0.1 * seed, 5: -0.6}
            logp, _ = policy.step(policy.start([[5]]), [policy.start_id])
            p = np.exp(logp[0])
            expected = None
            for draw in itertools.product(tokens, repeat=k):
                clone = policy.copy()
                out = policy_gradient_step(clone, SGD(clone.parameters(), lr=1.0), [[5]], [[[t] for t in draw]],
                                           [[reward[t] for t in draw]], None)
                w = np.prod([p[t] for t in draw])
                expected = ([w * g for g in out["grads"]] if expected is None
                            else [e + w * g for e, g in zip(expected, out["grads"])])
            with Tape() as tape:
                lp = policy.sequence_log_prob([[5], [5]], [[3], [5]])
                loss = ad.neg(ad.tensor_sum(ad.mul(ad.exp(lp), np.array([reward[3], reward[5]]))))
            exact = tape.backward(loss, policy.parameters())
            worst = max(worst, max(float(np.max(np.abs(e - x))) for e, x in zip(expected, exact)))

    policy = Seq2SeqPolicy(GeneratorConfig(vocab_size=9, emb_dim=4, hidden=3, dec_hidden=5, attn_dim=3), seed=1)
    before = {n: t.data.tobytes() for n, t in policy.params.items()}
    seqs = rollout(policy, [[5, 6], [7]], 4, 5, "categorical", np.random.default_rng(0))
    policy_gradient_step(policy, SGD(policy.parameters(), lr=0.3), [[5, 6], [7]], seqs, [[0.0] * 4] * 2)
    unchanged = all(t.data.tobytes() == before[n] for n, t in policy.params.items())
    ok = worst <= 1e-8 and unchanged
    acceptance(2, ok, f"max |E[estimate] - exact| {worst:.1e}; zero rewards leave theta bit-identical: {unchanged}")
    assert ok


def test_c3_rollout_cost(acceptance):
    rng = np.random.default_rng(3)
    policy = Seq2SeqPolicy(GeneratorConfig(vocab_size=40, emb_dim=8, hidden=8, dec_hidden=8, attn_dim=8), seed=0)
    sources = [list(rng.integers(5, 40, size=int(n))) for n in rng.integers(1, 8, size=64)]
    worst = {}
    for strategy in ("beam", "categorical"):
        counter = StepCounter()
        rollout(policy, sources, 4, 8, strategy, rng, counter)
        worst[strategy] = counter.max_per_source()
    ok = all(0 < v <= 32 for v in worst.values())
    acceptance(3, ok, f"K=4 T=8 max decoder steps per query: {worst}")
    assert ok


def _metric_fixtures(n, seed):
    rng = np.random.default_rng(seed)
    words = ["a", "b", "c", "d", "e", "f", UNK]

    def q():
        return " ".join(rng.choice(words, size=int(rng.integers(1, 7))))
    out = []
    for _ in range(n):
        pool = [q() for _ in range(3)]
        sugg = [pool[int(rng.integers(3))] if rng.random() < 0.5 else q() for _ in range(int(rng.integers(0, 9)))]
        out.append((q(), pool[0] if rng.random() < 0.4 else q(), sugg))
    return out


def test_c4_metric_oracles(acceptance):
    counts = {"a": 7, "b": 4, "c": 2, "d": 1, "e": 1, "f": 3}
    vocab = Vocabulary(counts, oov_count=5)
    mismatches = Counter()
    worst_real = 0.0
    rng = np.random.default_rng(11)
    for source, q_next, sugg in _metric_fixtures(1000, seed=5):
        mismatches["unique_at6"] += unique_at6(sugg) != unique_oracle(sugg)
        mismatches["precision_at6"] += precision_at6(sugg, q_next) != precision_oracle(sugg, q_next)
        for s in sugg or [source]:
            worst_real = max(worst_real, abs(rouge1(source, s) - rouge1_oracle(source, s)),
                             abs(repetitions_s(s) - repetitions_oracle(s)),
                             abs(prior_sentence_prob(s, vocab) - prior_prob_oracle(s, counts, 5)))
        x = rng.normal(size=int(rng.integers(2, 40))).tolist()
        m, h = mean_with_ci(x)
        m2, h2 = t_interval_oracle(x)
        worst_real = max(worst_real, abs(m - m2), abs(h - h2))
    ok = sum(mismatches.values()) == 0 and worst_real <= 1e-9
    acceptance(4, ok, f"1000 fixtures, count mismatches {dict(mismatches)}, worst real deviation {worst_real:.1e}")
    assert ok


def test_c5_negative_contracts(acceptance):
    events = synthesize_logs(SynthConfig(n_users=900), seed=4)
    queries = [e.query for e in events]
    rng = np.random.default_rng(8)
    pairs = [QueryPair(queries[i], queries[i + 1], 0) for i in rng.integers(0, len(queries) - 1, size=10_000)]
    vocab = build_vocab(queries, 2000)
    policy = Seq2SeqPolicy(default_config(vocab, emb_dim=8, hidden=8, dec_hidden=8, attn_dim=8), seed=0)
    bad = Counter()
    for p, negs in zip(pairs, gen_negatives_batch(pairs, policy, vocab, rng)):
        orig = tokenize(p.q_next)
        by = {e.method: e.candidate for e in negs}
        dup, unk, rep = tokenize(by["duplicate"]), tokenize(by["unk"]), tokenize(by["repeat"])
        collided = any(e.candidate == p.q_next for e in negs)
        bad["collision"] += collided
        extra = Counter(dup) - Counter(orig)
        bad["duplicate"] += not (len(dup) == len(orig) + 1 and sum(extra.values()) == 1
                                 and not Counter(orig) - Counter(dup) and list(extra)[0] in orig)
        bad["unk"] += not (len(unk) == len(orig) and unk.count(UNK) == 1
                           and sum(a != b for a, b in zip(unk, orig)) == 1)
        bad["repeat"] += not (1 <= len(rep) <= 7 and len(set(rep)) == 1)
    prior = Vocabulary({"a": 9, "b": 1})
    draws = [repeat_prior_word(prior, rng, 8)[0] for _ in range(10_000)]
    freq_a = draws.count("a") / len(draws)
    ok = sum(bad.values()) == 0 and abs(freq_a - 0.9) <= 0.02
    acceptance(5, ok, f"10000 pairs, contract violations {dict(bad)}, method-4 P(a) {freq_a:.4f} vs 0.9")
    assert ok


# ------------------------------------------------------- criteria 6 and 7

# Fine-tuning settings for the desk-scale corpus. K comes from the strategy
# presets; the step size and the categorical eta are re-tuned within the
# published grid because the published optima assume far longer runs.
DESK_FINETUNE = {
    "beam": {"rl_lr": 0.01},
    "categorical": {"rl_lr": 0.01, "eta": 0.1},
}
RL_SCHEDULE = {"rl_epochs": 2, "rl_steps_per_epoch": 100}
RL_SEEDS = (0, 1, 2)
EVAL_SEED = 12345


@pytest.fixture(scope="module")
def desk():
    """Synthetic corpus, pre-trained generator and naturalness estimator at the default desk-scale config."""
    start = time.perf_counter()
    cfg = RunConfig().resolved()
    data = prepare_corpus(synthesize_logs(SynthConfig(n_users=cfg.synth_users), seed=cfg.seed), cfg.vocab_size,
                          cfg.window_seconds, cfg.seed)
    policy = pretrain_stage(data.train, data.valid, data.vocab, cfg).policy
    examples, v_examples = estimator_examples(policy, data.train, data.valid, data.vocab, cfg)
    held_out = build_examples(data.test, policy, data.vocab, np.random.default_rng(cfg.seed + 1), cfg.t_max)
    t0 = time.perf_counter()
    est = estimator_stage(examples, v_examples, data.vocab, cfg)
    est_seconds = time.perf_counter() - t0
    return SimpleNamespace(start=start, cfg=cfg, data=data, policy=policy, est=est, est_seconds=est_seconds,
                           held_out=held_out)


def test_c6_estimator_quality(acceptance, desk):
    ex = desk.held_out
    probs = desk.est.model.predict(desk.data.vocab, [e.context for e in ex], [e.candidate for e in ex])
    r = classification_report(probs, np.array([e.label for e in ex]), desk.est.threshold)
    ok = r["f1"] >= 0.75 and r["accuracy"] >= 0.85 and desk.est_seconds < 600
    acceptance(6, ok, f"held-out {len(ex)} examples: F1 {r['f1']:.4f}, accuracy {r['accuracy']:.4f} at threshold "
                      f"{desk.est.threshold:.2f}; training {desk.est_seconds:.0f}s")
    assert ok


def _strategy_scores(policy, reward_model, vocab, pairs, feedback, strategy):
    """Mean reward of six validation rollouts per query under ``strategy``, plus suggestion-suite metrics."""
    report = evaluate_policy(policy, vocab, pairs, feedback)
    return {"reward": mean_sampled_reward(policy, reward_model, vocab, pairs, 6, strategy, seed=EVAL_SEED),
            "repetitions_s": report["repetitions_s"].mean, "unique_at6": report["unique_at6"].mean}


def test_c7_end_to_end_direction(acceptance, desk):
    data, est = desk.data, desk.est.model
    lines, failures, gains = [], [], {seed: {} for seed in RL_SEEDS}
    for strategy in ("beam", "categorical"):
        cfg = apply_overrides(RunConfig(), {"strategy": strategy, **DESK_FINETUNE[strategy], **RL_SCHEDULE}).resolved()
        valid = data.valid[:cfg.n_valid]
        feedback = FeedbackIndex.from_pairs(data.valid)
        reward_model = RewardModel(feedback, est, data.vocab, cfg.eta)
        base = _strategy_scores(desk.policy, reward_model, data.vocab, valid, feedback, strategy)
        for seed in RL_SEEDS:
            run_cfg = apply_overrides(cfg, {"seed": seed})
            tuned_policy = finetune_stage(desk.policy.copy(), est, data.train, data.valid, data.vocab, run_cfg).policy
            tuned = _strategy_scores(tuned_policy, reward_model, data.vocab, valid, feedback, strategy)
            gain = (tuned["reward"] - base["reward"]) / abs(base["reward"])
            gains[seed][strategy] = gain
            if not tuned["reward"] > base["reward"]:
                failures.append(f"{strategy}/{seed}: reward")
            if cfg.eta >= 1 and not tuned["repetitions_s"] < base["repetitions_s"]:
                failures.append(f"{strategy}/{seed}: repetitions not lower")
            if not tuned["repetitions_s"] <= base["repetitions_s"]:
                failures.append(f"{strategy}/{seed}: repetitions worse")
            if not tuned["unique_at6"] >= base["unique_at6"]:
                failures.append(f"{strategy}/{seed}: unique@6 worse")
            lines.append(f"{strategy} eta={cfg.eta} seed={seed}: reward {base['reward']:.4f}->{tuned['reward']:.4f} "
                         f"({gain:+.1%}), repetitions {base['repetitions_s']:.5f}->{tuned['repetitions_s']:.5f}, "
                         f"unique@6 {base['unique_at6']:.3f}->{tuned['unique_at6']:.3f}")
    for seed in RL_SEEDS:
        if max(gains[seed].values()) < 0.05:
            failures.append(f"seed {seed}: no strategy gains 5%")
    elapsed = time.perf_counter() - desk.start
    if elapsed >= 1800:
        failures.append("over 30 minutes")
    print("\n".join(lines))
    ok = not failures
    acceptance(7, ok, f"{len(lines)} runs, all seeds agree: {not any('reward' in f for f in failures)}; "
                      f"best gain {max(max(g.values()) for g in gains.values()):+.1%}; pipeline {elapsed:.0f}s"
                      + (f"; failures {failures}" if failures else ""))
    assert ok, failures


# ---------------------------------------------------------------- criterion 8

def _cli_chain(d, seed="5"):
    small = ["--emb-dim", "8", "--hidden", "8", "--dec-hidden", "8", "--attn-dim", "8", "--vocab-size", "300",
             "--seed", seed]
    steps = [
        ["synth", "--out", str(d / "log.tsv"), "--synth-users", "60"],
        ["prepare", "--log", str(d / "log.tsv"), "--out", str(d / "data")],
        ["pretrain", "--data", str(d / "data"), "--out", str(d / "gen.ckpt"), "--epochs", "1"],
        ["train-estimator", "--data", str(d / "data"), "--generator", str(d / "gen.ckpt"), "--out",
         str(d / "est.ckpt"), "--est-pairs", "80", "--est-epochs", "1", "--est-hidden", "8"],
        ["finetune", "--data", str(d / "data"), "--generator", str(d / "gen.ckpt"), "--estimator",
         str(d / "est.ckpt"), "--out", str(d / "rl.ckpt"), "--rl-epochs", "1", "--rl-steps-per-epoch", "3",
         "--rl-batch-size", "4", "--n-valid", "10", "--rl-lr", "0.01", "--strategy", "categorical"],
        ["evaluate", "--data", str(d / "data"), "--generator", str(d / "rl.ckpt"), "--estimator",
         str(d / "est.ckpt"), "--limit", "20", "--out", str(d / "report.tsv")],
    ]
    for argv in steps:
        assert main([*argv, *small]) == 0, argv
    return (d / "report.tsv").read_bytes()


def test_c8_determinism_and_persistence(acceptance, tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    reports_equal = _cli_chain(tmp_path / "a") == _cli_chain(tmp_path / "b")
    ckpt_equal = all((tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
                     for n in ("gen.ckpt", "est.ckpt", "rl.ckpt"))

    data = prepare_corpus(synthesize_logs(SynthConfig(n_users=60), seed=2), 300)
    policy = Seq2SeqPolicy(default_config(data.vocab, emb_dim=8, hidden=8, dec_hidden=8, attn_dim=8), seed=3)
    opt = Adam(policy.parameters(), lr=5e-3)
    src, tgt = encode_pairs(data.train[:40], data.vocab)
    for i in range(4):
        train_step(policy, opt, src[i * 8:(i + 1) * 8], tgt[i * 8:(i + 1) * 8], np.random.default_rng(i))
    save_generator(tmp_path / "resume.ckpt", policy, opt, step=4)
    back, ckpt = load_generator(tmp_path / "resume.ckpt")
    bit_exact = all(back.params[n].data.tobytes() == t.data.tobytes() for n, t in policy.params.items())
    back_opt = restore_optimizer(ckpt, back.parameters())
    loss_a = train_step(policy, opt, src[32:40], tgt[32:40], np.random.default_rng(9))
    loss_b = train_step(back, back_opt, src[32:40], tgt[32:40], np.random.default_rng(9))
    after_equal = all(back.params[n].data.tobytes() == t.data.tobytes() for n, t in policy.params.items())
    ok = reports_equal and ckpt_equal and bit_exact and loss_a == loss_b and after_equal
    acceptance(8, ok, f"reports identical {reports_equal}, checkpoints identical {ckpt_equal}, round trip bit-exact "
                      f"{bit_exact}, next-step loss {loss_a:.6f} vs {loss_b:.6f}")
    assert ok


# ---------------------------------------------------------------- criterion 9

def test_c9_beam_greedy_and_exhaustive(acceptance):
    rng = np.random.default_rng(21)
    policy = Seq2SeqPolicy(GeneratorConfig(vocab_size=30, emb_dim=8, hidden=8, dec_hidden=8, attn_dim=8), seed=4)
    for t in policy.params.values():
        t.data = t.data * 20  # sharper, more varied distributions than the near-uniform init
    sources = [list(rng.integers(5, 30, size=int(n))) for n in rng.integers(1, 9, size=1000)]
    beams = beam_search_batch(policy, sources, 1, 8)
    greedy = greedy_decode(policy, sources, 8)
    same = sum(b[0].tokens == g.tokens for b, g in zip(beams, greedy))

    table = {(): [0, 0.3, 0.6, 0.1], (2,): [0, 0.2, 0.1, 0.7], (3,): [0, 0.5, 0.25, 0.25]}
    toy_ok = all([h.tokens for h in beam_search(TablePolicy(table=table), (1,), k, 2)]
                 == [s for s, _ in exhaustive_top_k(TablePolicy(table=table), (1,), 2, k)] for k in (1, 2))
    unpruned_ok = all([h.tokens for h in beam_search(TablePolicy(vocab_size=4, seed=s), (1,), 8, 4)]
                      == [q for q, _ in exhaustive_top_k(TablePolicy(vocab_size=4, seed=s), (1,), 4, 8)]
                      for s in range(10))
    ok = same == 1000 and toy_ok and unpruned_ok
    acceptance(9, ok, f"width-1 beam equals greedy on {same}/1000 queries; toy top-k {toy_ok}; "
                      f"unpruned top-8 {unpruned_ok}")
    assert ok
