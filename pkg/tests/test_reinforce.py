import itertools

import numpy as np
import pytest

from querydrl import autodiff as ad
from querydrl.autodiff import Tape
from querydrl.corpus import FeedbackIndex, QueryPair
from querydrl.decoding import StepCounter
from querydrl.generator import GeneratorConfig, Seq2SeqPolicy, default_config, rollout
from querydrl.optim import SGD
from querydrl.reinforce import (RolloutPolicy, StepStats, TrainConfig, finetune, format_stats, monitor_loss,
                                policy_gradient_step)
from querydrl.reward import RewardModel

# two generatable tokens: <END> (3) and 5
TOY_TOKENS = (3, 5)


def toy_policy(seed=0):
    cfg = GeneratorConfig(vocab_size=6, emb_dim=3, hidden=2, dec_hidden=3, attn_dim=2, dropout=0.0,
                          banned_ids=(0, 1, 2, 4))
    with ad.precision(np.float64):
        return Seq2SeqPolicy(cfg, seed=seed).astype(np.float64)


def token_probs(policy, source):
    logp, _ = policy.step(policy.start([source]), [policy.start_id])
    return np.exp(logp[0])


def estimator_grads(policy, sources, rollouts, rewards):
    """Gradient of the surrogate loss, taken from a throwaway copy."""
    clone = policy.copy()
    with ad.precision(np.float64):
        out = policy_gradient_step(clone, SGD(clone.parameters(), lr=1.0), sources, rollouts, rewards, None)
    return out["grads"]


class TestGradientEstimator:
    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_unbiased_on_enumerable_toy(self, k):
        policy = toy_policy(seed=k)
        source = [5, 5]
        reward = {3: 0.3, 5: -0.7}
        p = token_probs(policy, source)
        # expectation of the K-sample estimate over every possible draw
        expected = None
        for draw in itertools.product(TOY_TOKENS, repeat=k):
            weight = np.prod([p[t] for t in draw])
            g = estimator_grads(policy, [source], [[[t] for t in draw]], [[reward[t] for t in draw]])
            expected = [weight * x for x in g] if expected is None else [e + weight * x for e, x in zip(expected, g)]
        # exact gradient of -E[R] = -sum_y p(y) R(y), differentiated through the probabilities
        params = policy.parameters()
        with ad.precision(np.float64), Tape() as tape:
            logp = policy.sequence_log_prob([source, source], [[3], [5]])
            j = ad.tensor_sum(ad.mul(ad.exp(logp), np.array([reward[3], reward[5]])))
            loss = ad.neg(j)
        exact = tape.backward(loss, params)
        for e, x in zip(expected, exact):
            np.testing.assert_allclose(e, x, rtol=0, atol=1e-8)

    def test_closed_form_output_bias_gradient(self):
        policy = toy_policy(seed=4)
        source = [5]
        p = token_probs(policy, source)
        for tok, r in ((3, 0.8), (5, -1.3)):
            g = estimator_grads(policy, [source], [[[tok]]], [[r]])
            grad_b = dict(zip(policy.params, g))["out.b"]
            # ascent direction on R log p(tok) wrt its own logit is R (1 - p)
            assert -grad_b[tok] == pytest.approx(r * (1 - p[tok]), abs=1e-10)
            other = 5 if tok == 3 else 3
            assert -grad_b[other] == pytest.approx(-r * p[other], abs=1e-10)

    def test_zero_rewards_leave_parameters_bit_identical(self, rng):
        policy = Seq2SeqPolicy(GeneratorConfig(vocab_size=9, emb_dim=4, hidden=3, dec_hidden=5, attn_dim=3))
        before = {n: t.data.copy() for n, t in policy.params.items()}
        sources = [[5, 6], [7]]
        seqs = rollout(policy, sources, 3, 4, "categorical", rng)
        policy_gradient_step(policy, SGD(policy.parameters(), lr=0.5), sources, seqs, [[0.0] * 3] * 2)
        for n, t in policy.params.items():
            assert t.data.tobytes() == before[n].tobytes()

    def test_doubling_rewards_doubles_norm(self, rng):
        policy = toy_policy(seed=2)
        sources = [[5], [5, 5]]
        seqs = [[[3], [5]], [[5], [5]]]
        r = [[0.4, -0.1], [0.9, 0.2]]
        norms = []
        for scale in (1.0, 2.0):
            clone = policy.copy()
            out = policy_gradient_step(clone, SGD(clone.parameters(), lr=1e-3), sources, seqs,
                                       [[scale * x for x in row] for row in r], None)
            norms.append(out["grad_norm"])
        # scaling by two is exact in binary floating point
        assert norms[1] == 2 * norms[0]

    def test_scored_under_current_parameters(self):
        policy = toy_policy(seed=1)
        out = policy_gradient_step(policy, SGD(policy.parameters(), lr=1e-3), [[5]], [[[5]]], [[1.0]], None)
        assert out["monitor_loss"] == pytest.approx(-np.log(token_probs(toy_policy(seed=1), [5])[5]), abs=1e-10)


class TestMonitorLoss:
    def test_examples(self):
        assert monitor_loss([0.0, 0.0], [-1.0, -3.0]) == 0.0
        assert monitor_loss([1.0], [-2.0]) == 2.0
        assert monitor_loss([-1.0], [-0.5]) == -0.5
        assert monitor_loss([], []) == 0.0

    def test_mean_over_all_samples(self):
        assert monitor_loss([1.0, 0.5, 0.0, 2.0], [-1.0, -2.0, -3.0, -0.5]) == pytest.approx((1 + 1 + 0 + 1) / 4)

    def test_stats_format(self):
        text = format_stats([StepStats(1, 0.5, 1.25, 3.0, 32)])
        assert text.splitlines() == ["step\tmean_reward\tmonitor_loss\tgrad_norm", "1\t0.500000\t1.250000\t3.000000"]


class TestRolloutPolicy:
    def test_frozen_between_syncs_and_equal_at_sync(self):
        policy = toy_policy()
        beta = RolloutPolicy(policy)
        snap = {n: t.data.tobytes() for n, t in beta.policy.params.items()}
        for t in policy.params.values():
            t.data += 0.1
        assert all(t.data.tobytes() == snap[n] for n, t in beta.policy.params.items())
        beta.sync(policy)
        for n, t in policy.params.items():
            assert np.max(np.abs(beta.policy.params[n].data - t.data)) == 0.0
        assert beta.syncs == 2

    def test_same_seed_same_rollouts(self):
        beta = RolloutPolicy(Seq2SeqPolicy(GeneratorConfig(vocab_size=9, emb_dim=4, hidden=3, dec_hidden=5,
                                                           attn_dim=3)))
        a = rollout(beta.policy, [[5, 6]], 3, 5, "categorical", np.random.default_rng(3))
        b = rollout(beta.policy, [[5, 6]], 3, 5, "categorical", np.random.default_rng(3))
        assert a == b

    @pytest.mark.parametrize("strategy", ["beam", "categorical"])
    def test_decoder_steps_within_k_times_t(self, strategy, rng):
        policy = Seq2SeqPolicy(GeneratorConfig(vocab_size=12, emb_dim=4, hidden=3, dec_hidden=5, attn_dim=3))
        counter = StepCounter()
        rollout(policy, [[5, 6, 7]], 4, 8, strategy, rng, counter)
        assert 0 < counter.max_per_source() <= 32


class ConstantEstimator:
    def predict(self, vocab, contexts, candidates):
        return np.full(len(candidates), 0.5)


class TestFinetune:
    def _setup(self, tiny_vocab, tiny_pairs):
        policy = Seq2SeqPolicy(default_config(tiny_vocab, emb_dim=6, hidden=6, dec_hidden=6, attn_dim=6), seed=0)
        rm = RewardModel(FeedbackIndex.from_pairs(tiny_pairs), ConstantEstimator(), tiny_vocab, eta=0.1)
        return policy, rm

    def test_one_record_per_step_and_counter(self, tiny_vocab, tiny_pairs):
        policy, rm = self._setup(tiny_vocab, tiny_pairs)
        cfg = TrainConfig(k=2, lr=1e-2, batch_size=2, epochs=2, strategy="categorical", max_len=5)
        res = finetune(policy, rm, tiny_vocab, tiny_pairs, tiny_pairs[:2], FeedbackIndex.from_pairs(tiny_pairs), cfg)
        assert [s.step for s in res.stats] == list(range(1, 7))
        assert all(s.rollout_steps_per_query <= 2 * 5 for s in res.stats)
        assert len(res.validation) == 2 and 0 <= res.best_epoch < 2

    def test_deterministic(self, tiny_vocab, tiny_pairs):
        outs = []
        for _ in range(2):
            policy, rm = self._setup(tiny_vocab, tiny_pairs)
            cfg = TrainConfig(k=2, lr=1e-2, batch_size=3, epochs=1, strategy="beam", max_len=4)
            res = finetune(policy, rm, tiny_vocab, tiny_pairs, tiny_pairs, FeedbackIndex(), cfg)
            outs.append((format_stats(res.stats), {n: t.data.tobytes() for n, t in res.policy.params.items()}))
        assert outs[0] == outs[1]

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            TrainConfig(k=0).validate()
        with pytest.raises(ValueError):
            TrainConfig(strategy="greedy").validate()
        with pytest.raises(ValueError):
            TrainConfig(sync_every=0).validate()
