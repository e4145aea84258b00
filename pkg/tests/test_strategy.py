import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gradcheck import rel_error
from freqbackdoor.data import balanced_counts, select_triggers
from freqbackdoor.signal import InjectionStrategy
from freqbackdoor.strategy import (
    GeneticConfig,
    OptimizerConfig,
    PolicyNet,
    RewardBreakdown,
    StrategyEvaluator,
    best_strategies,
    default_surrogate_spec,
    dis_term,
    genetic_search,
    load_strategies,
    mask_dc,
    optimize_class,
    optimize_strategies,
    policy_gradient_search,
    random_search,
    random_strategy,
    reward,
    sample_strategy,
    sample_subset,
    save_strategies,
)
from freqbackdoor.models import TrainConfig, TrainingDiverged


def fake_reward(strategy, index):
    """Deterministic stand-in for surrogate training: favours bin 3 and electrode 1."""
    hit = (3 in strategy.freq_bins) + (1 in strategy.electrodes)
    return RewardBreakdown(0.5, hit / 2, dis_term(strategy.freq_bins, 9), min(strategy.freq_bins))


class TestReward:
    def test_worked_example_terms(self):
        assert dis_term((2, 3, 5, 7, 9), 65) == 1
        r = reward(0.5, 0.9, InjectionStrategy(0, (0,), (2, 3, 5, 7, 9)), 65)
        assert (r.dis_term, r.hf_term) == (1.0, 2.0)

    def test_worked_example_total(self):
        r = reward(0.5, 0.9, InjectionStrategy(0, (0,), (2, 3, 5, 7, 9)), 65, 2.0, 0.3, 0.005)
        assert r.total == pytest.approx(2.61, abs=1e-12)

    def test_singleton_convention(self):
        r = reward(0.0, 0.0, InjectionStrategy(0, (0,), (5,)), 65)
        assert r.total == pytest.approx(0.3 * 65 + 0.005 * 5, abs=1e-12)

    @given(st.lists(st.integers(1, 64), min_size=2, max_size=10, unique=True),
           st.floats(0, 1), st.floats(0, 1))
    def test_total_recomputes(self, bins, ca, asr):
        r = reward(ca, asr, InjectionStrategy(0, (0,), tuple(sorted(bins))), 65)
        assert r.dis_term >= 1
        d = r.to_dict()
        assert abs(d["total"] - (d["ca"] + d["lam"] * d["asr"] + d["mu"] * d["dis_term"] + d["nu"] * d["hf_term"])) < 1e-12


class TestSampling:
    def test_greedy_example(self):
        v2 = np.array([-np.inf, 0, 5, 0, 3])
        idx, _, _ = sample_subset(v2, 2, None, greedy=True)
        assert idx.tolist() == [2, 4]

    def test_default_cardinalities(self):
        s = sample_strategy(np.zeros(8), np.zeros(65), 0.5, 0.1, np.random.default_rng(0))
        assert len(s.strategy.electrodes) == 4 and len(s.strategy.freq_bins) == 7
        assert 0 not in s.strategy.freq_bins

    # integer-valued logits keep the shift exact in floating point
    @given(st.lists(st.integers(-5, 5), min_size=6, max_size=6), st.integers(-100, 100), st.integers(1, 5))
    def test_greedy_shift_invariant(self, v, shift, k):
        v = np.array(v, dtype=np.float64)
        a, _, _ = sample_subset(v, k, None, greedy=True)
        b, _, _ = sample_subset(v + shift, k, None, greedy=True)
        assert a.tolist() == b.tolist()

    def test_too_large_k(self):
        with pytest.raises(ValueError):
            sample_subset(mask_dc(np.zeros(4)), 4, np.random.default_rng(0))

    def test_logprob_and_gradient(self):
        rng = np.random.default_rng(1)
        v = rng.standard_normal(6)
        idx, lp, g = sample_subset(v, 3, rng)
        lsm = v - np.log(np.exp(v).sum())
        assert lp == pytest.approx(lsm[idx].sum(), abs=1e-12)
        num = np.array([(np.log(np.exp(v + h).sum()) - np.log(np.exp(v - h).sum())) for h in np.eye(6) * 1e-6]) / 2e-6
        expect = -3 * num
        expect[idx] += 1
        np.testing.assert_allclose(g, expect, atol=1e-6)

    def test_gumbel_topk_matches_sequential_sampling(self):
        # first pick under Gumbel-top-k is a softmax draw
        v = np.array([0.0, 1.0, 2.0])
        rng = np.random.default_rng(2)
        first = [np.argmax(v + rng.gumbel(size=3)) for _ in range(20000)]
        freq = np.bincount(first, minlength=3) / 20000
        np.testing.assert_allclose(freq, np.exp(v) / np.exp(v).sum(), atol=0.015)

    def test_random_strategy_shape(self):
        s = random_strategy(8, 65, 0.5, 0.1, np.random.default_rng(3), target_class=2)
        assert len(s.electrodes) == 4 and len(s.freq_bins) == 7 and s.freq_bins[0] >= 1 and s.target_class == 2


class TestPolicyNet:
    def test_shapes_and_determinism(self):
        net = PolicyNet(8, 128, seed=0, channels=(4, 8), hidden=16)
        x = np.random.default_rng(0).standard_normal((8, 128))
        v1, v2 = net.logits(x)
        assert v1.shape == (8,) and v2.shape == (65,)
        w1, w2 = net.logits(x)
        assert np.array_equal(v1, w1) and np.array_equal(v2, w2)

    def test_zero_params_zero_logits(self):
        net = PolicyNet(3, 16, channels=(2, 2), hidden=4)
        net.params[:] = 0
        v1, v2 = net.logits(np.random.default_rng(0).standard_normal((3, 16)))
        assert not v1.any() and not v2.any()

    def test_initial_policy_uniform(self):
        v1, v2 = PolicyNet(8, 128).logits(np.random.default_rng(1).standard_normal((8, 128)))
        assert not v1.any() and not v2.any()

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            PolicyNet(3, 16).logits(np.zeros((3, 8)))

    def test_logprob_gradient(self):
        rng = np.random.default_rng(4)
        net = PolicyNet(3, 16, seed=1, channels=(2, 3), hidden=5)
        net.params[:] = rng.standard_normal(net.n_params) * 0.5
        x = rng.standard_normal((3, 16))
        v1, v2, cache = net.forward(x)
        s = sample_strategy(v1, v2, 0.5, 0.3, rng)
        g = net.backward(cache, s.d_v1, s.d_v2)
        el, fb = list(s.strategy.electrodes), list(s.strategy.freq_bins)

        def logprob():
            a, b = net.logits(x)
            b = b[1:]
            la = a - np.log(np.exp(a).sum())
            lb = b - np.log(np.exp(b).sum())
            return la[el].sum() + lb[[f - 1 for f in fb]].sum()

        idx = rng.choice(net.n_params, size=60, replace=False)
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            old = net.params[i]
            net.params[i] = old + 1e-6
            lp = logprob()
            net.params[i] = old - 1e-6
            lm = logprob()
            net.params[i] = old
            num[j] = (lp - lm) / 2e-6
        assert rel_error(g[idx], num) < 1e-5


class TestSearch:
    cfg = OptimizerConfig(iterations=40, gamma=0.5, beta=0.25, seed=0)

    def test_reinforce_learns_toy_problem(self):
        trigger = np.random.default_rng(0).standard_normal((2, 16))
        cfg = OptimizerConfig(iterations=200, gamma=0.5, beta=1 / 9, seed=1, baseline="moving_average",
                              policy_lr=1e-3)
        res = policy_gradient_search(trigger, fake_reward, cfg, 0)
        late = [t.strategy for t in res.trace[-50:]]
        assert np.mean([3 in s.freq_bins and 1 in s.electrodes for s in late]) > 0.8
        assert res.strategy.freq_bins == (3,) and res.strategy.electrodes == (1,)

    def test_trace_bookkeeping(self):
        trigger = np.zeros((2, 16))
        res = policy_gradient_search(trigger, fake_reward, self.cfg, 0)
        assert len(res.trace) == 40
        best = res.best_trace
        assert np.all(np.diff(best) >= 0) and best[-1] == res.best_total == np.nanmax(res.rewards)

    def test_baseline_first_update_is_neutral(self):
        trigger = np.random.default_rng(5).standard_normal((2, 16))
        const = lambda s, i: RewardBreakdown(0.0, 0.0, 1.0, 1.0)

        def second_sample(evaluate, baseline):
            cfg = OptimizerConfig(iterations=2, baseline=baseline, gamma=0.5, beta=0.25, policy_lr=0.05)
            return policy_gradient_search(trigger, evaluate, cfg, 0).trace[1].strategy

        # the first reward only seeds the baseline, so what it was cannot affect the next draw
        assert second_sample(fake_reward, "moving_average") == second_sample(const, "moving_average")

    def test_single_iteration(self):
        res = policy_gradient_search(np.zeros((2, 16)), fake_reward, OptimizerConfig(iterations=1), 0)
        assert res.strategy == res.trace[0].strategy

    def test_failures_are_skipped(self):
        calls = []

        def flaky(s, i):
            calls.append(i)
            if i % 3 == 0:
                raise TrainingDiverged("boom")
            return fake_reward(s, i)

        res = random_search(2, 9, flaky, self.cfg, 0, budget=9)
        assert len(res.trace) == 9 and sum(t.breakdown is None for t in res.trace) == 3
        assert res.strategy is not None

    def test_random_search_prefix_property(self):
        small = random_search(2, 9, fake_reward, self.cfg, 0, budget=5)
        large = random_search(2, 9, fake_reward, self.cfg, 0, budget=20)
        assert [t.strategy for t in large.trace[:5]] == [t.strategy for t in small.trace]
        assert large.best_total >= small.best_total

    def test_random_search_budget_one(self):
        res = random_search(2, 9, fake_reward, self.cfg, 1, budget=1)
        assert res.strategy == res.trace[0].strategy and res.strategy.target_class == 1

    def test_genetic_invariants(self):
        cfg = OptimizerConfig(iterations=60, gamma=0.5, beta=0.25, genetic=GeneticConfig(population=6), seed=3)
        res = genetic_search(4, 17, fake_reward, cfg, 0)
        assert len(res.trace) == 60
        for t in res.trace:
            assert len(t.strategy.electrodes) == 2 and len(t.strategy.freq_bins) == 4
            assert 0 not in t.strategy.freq_bins
        initial_best = max(t.breakdown.total for t in res.trace[:6])
        assert res.best_total >= initial_best

    def test_genetic_deterministic(self):
        a = genetic_search(4, 17, fake_reward, self.cfg, 0, budget=25)
        b = genetic_search(4, 17, fake_reward, self.cfg, 0, budget=25)
        assert [t.strategy for t in a.trace] == [t.strategy for t in b.trace]

    def test_population_one_rejected(self):
        with pytest.raises(ValueError):
            GeneticConfig(population=1)

    @pytest.mark.parametrize("kw", [dict(iterations=0), dict(gamma=0.0), dict(beta=1.5), dict(algorithm="sa"),
                                    dict(baseline="critic"), dict(evaluate_on="train"), dict(poison_reference="x")])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            OptimizerConfig(**kw)

    def test_config_roundtrip(self):
        cfg = OptimizerConfig(iterations=7, surrogate_train=TrainConfig(epochs=2), genetic=GeneticConfig(4))
        assert OptimizerConfig.from_dict(cfg.to_dict()) == cfg


class TestEvaluator:
    def test_real_evaluator_scores(self, small_splits):
        bank = select_triggers(small_splits.poison_source)
        cfg = OptimizerConfig(iterations=2, surrogate_train=TrainConfig(lr=5e-3, epochs=1))
        ev = StrategyEvaluator(small_splits, bank, 1, cfg, default_surrogate_spec(8, 128, 3))
        s = InjectionStrategy(1, (0, 1, 2, 3), (10, 20, 30, 40, 50, 60, 64))
        r1, r2 = ev(s, 0), ev(s, 0)
        assert r1 == r2
        assert 0 <= r1.ca <= 1 and 0 <= r1.asr <= 1 and r1.dis_term == 4 and r1.hf_term == 10
        P = ev.poison(s, 0)
        assert len(P) == ev.count == balanced_counts(round(0.4 * len(small_splits.poison_source)), 3)[1]
        assert set(P.y) == {1}

    def test_optimize_strategies_end_to_end(self, small_splits, tmp_path):
        bank = select_triggers(small_splits.poison_source)
        cfg = OptimizerConfig(iterations=2, surrogate_train=TrainConfig(lr=5e-3, epochs=1))
        results = optimize_strategies(small_splits, bank, cfg)
        assert sorted(results) == [0, 1, 2]
        strategies = best_strategies(results)
        path = save_strategies(tmp_path / "s.json", strategies, 128, 128.0, results)
        assert load_strategies(path) == strategies
        for alg in ("random", "genetic"):
            r = optimize_class(small_splits, bank, 0, OptimizerConfig(
                iterations=3, algorithm=alg, surrogate_train=TrainConfig(epochs=1), genetic=GeneticConfig(2)))
            assert len(r.trace) == 3 and r.algorithm == alg

    def test_best_strategies_needs_success(self):
        from freqbackdoor.strategy import ClassResult

        with pytest.raises(RuntimeError):
            best_strategies({0: ClassResult(0, None, None, [], "random")})


def test_strategy_file_version(tmp_path):
    p = tmp_path / "s.json"
    p.write_text('{"format_version": 99, "classes": []}')
    with pytest.raises(ValueError):
        load_strategies(p)


def test_reward_breakdown_total_property():
    b = RewardBreakdown(1.0, 1.0, 2.0, 3.0)
    assert math.isclose(b.total, 1 + 2 + 0.6 + 0.015)
