"""Model fitting and the value recursion."""

import numpy as np
import pytest

from ope_mix import direct_method as dm
from ope_mix import oracle, recsim
from ope_mix.direct_method import (
    EmpiricalTransition,
    RidgeModel,
    ZeroQV,
    dm_value,
    fit_logistic,
    fit_recsim_dm,
    fit_ridge,
    recsim_qv,
    value_iteration,
)
from ope_mix.linalg import NotSPDError
from ope_mix.oracle import TabularMDP, TabularPolicy


class TestRidge:
    def test_exact_linear_fit(self):
        x = np.arange(10, dtype=float)[:, None]
        model = fit_ridge(x, 2.0 * x[:, 0], lam=0.0)
        assert model.weights[0] == pytest.approx(2.0, abs=1e-10)
        assert model.intercept == pytest.approx(0.0, abs=1e-9)

    def test_constant_targets(self):
        rng = np.random.default_rng(0)
        model = fit_ridge(rng.standard_normal((20, 3)), np.full(20, 5.0), lam=0.1)
        np.testing.assert_allclose(model.weights, 0.0, atol=1e-9)
        assert model.intercept == pytest.approx(5.0)

    def test_huge_lambda_shrinks_weights(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((30, 4))
        y = x @ np.array([0.4, -0.6, 0.2, 0.5]) + 0.05 * rng.standard_normal(30)
        model = fit_ridge(x, y, lam=1e8)
        assert np.abs(model.weights).max() < 1e-6

    def test_rank_deficient_without_ridge_fails(self):
        x = np.ones((5, 2))  # centered -> zero matrix
        with pytest.raises(NotSPDError):
            fit_ridge(x, np.arange(5.0), lam=0.0)

    def test_json_round_trip(self):
        model = RidgeModel(weights=np.array([1.5, -0.5]), intercept=0.25, lam=1.0)
        again = RidgeModel.from_json_dict(model.to_json_dict())
        np.testing.assert_allclose(again.weights, model.weights)
        assert again.intercept == model.intercept
        assert again.lam == model.lam


class TestLogistic:
    def test_recovers_separation_direction(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((4000, 2))
        p = 1.0 / (1.0 + np.exp(-(1.5 * x[:, 0] - 0.8 * x[:, 1] + 0.3)))
        y = (rng.random(4000) < p).astype(float)
        model = fit_logistic(x, y, lam=1e-4)
        assert model.weights[0] == pytest.approx(1.5, abs=0.15)
        assert model.weights[1] == pytest.approx(-0.8, abs=0.15)
        assert model.intercept == pytest.approx(0.3, abs=0.15)

    def test_probabilities_in_unit_interval(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((100, 3))
        y = (rng.random(100) < 0.5).astype(float)
        probs = fit_logistic(x, y).predict_proba(x)
        assert np.all((probs > 0) & (probs < 1))


class TestTransitions:
    def test_counts_normalize(self):
        counts = np.zeros((2, 1, 2))
        counts[0, 0] = [3, 1]
        trans = EmpiricalTransition.from_counts(counts)
        np.testing.assert_allclose(trans.probs[0, 0], [0.75, 0.25])
        np.testing.assert_allclose(trans.probs[1, 0], [0.5, 0.5])  # unseen -> uniform

    def test_continue_stop_expected_value(self):
        trans = EmpiricalTransition(
            kind="continue_stop",
            next_state=np.array([[1], [0]]),
            p_continue=np.array([[0.5], [0.25]]),
        )
        ev = trans.expected_value(np.array([2.0, 4.0]))
        np.testing.assert_allclose(ev, [[2.0], [0.5]])


class TestValueIteration:
    def test_zero_iters_gives_zero_provider(self):
        qv = value_iteration(
            np.ones((2, 2)),
            EmpiricalTransition(kind="tabular", probs=np.full((2, 2, 2), 0.5)),
            TabularPolicy(np.full((2, 2), 0.5)),
            gamma=0.9,
            iters=0,
        )
        assert qv.q({"s": 0.0}, 1) == 0.0
        assert qv.v({"s": 1.0}) == 0.0

    def test_gamma_zero_one_sweep_is_reward(self):
        r = np.array([[1.0, 2.0], [3.0, 4.0]])
        qv = value_iteration(
            r,
            EmpiricalTransition(kind="tabular", probs=np.full((2, 2, 2), 0.5)),
            TabularPolicy(np.full((2, 2), 0.5)),
            gamma=1e-15,
            iters=1,
        )
        np.testing.assert_allclose(qv.q_table, r, atol=1e-12)

    def test_matches_finite_horizon_dp(self):
        rng = np.random.default_rng(4)
        p = rng.random((3, 2, 3))
        p /= p.sum(axis=2, keepdims=True)
        r = rng.random((3, 2))
        policy = TabularPolicy(
            (rng.random((3, 2)) + 0.2) / (rng.random((3, 2)) + 0.2).sum(1, keepdims=True)
        )
        gamma, iters = 0.8, 12

        qv = value_iteration(
            r, EmpiricalTransition(kind="tabular", probs=p), policy, gamma, iters
        )
        # independent DP oracle: backward induction over `iters` steps
        v = np.zeros(3)
        for _ in range(iters):
            q = r + gamma * np.einsum("sau,u->sa", p, v)
            v = (policy.table * q).sum(axis=1)
        np.testing.assert_allclose(qv.v_table, v, atol=1e-12)
        vmax = np.abs(r).max() / (1 - gamma)
        exact = np.zeros(3)
        for _ in range(500):
            q = r + gamma * np.einsum("sau,u->sa", p, exact)
            exact = (policy.table * q).sum(axis=1)
        assert np.abs(qv.v_table - exact).max() <= gamma**iters * vmax

    def test_contraction(self):
        rng = np.random.default_rng(5)
        p = rng.random((3, 2, 3))
        p /= p.sum(axis=2, keepdims=True)
        r = rng.random((3, 2))
        policy = TabularPolicy(np.full((3, 2), 0.5))
        gamma = 0.7
        trans = EmpiricalTransition(kind="tabular", probs=p)
        diffs = []
        prev_v = np.zeros(3)
        for iters in range(1, 8):
            v = value_iteration(r, trans, policy, gamma, iters).v_table
            diffs.append(np.abs(v - prev_v).max())
            prev_v = v
        for a, b in zip(diffs[1:], diffs[:-1]):
            assert a <= gamma * b + 1e-12

    def test_consistency_invariant_v_is_policy_average_of_q(self):
        rng = np.random.default_rng(6)
        p = rng.random((4, 3, 4))
        p /= p.sum(axis=2, keepdims=True)
        r = rng.random((4, 3))
        table = rng.random((4, 3)) + 0.1
        policy = TabularPolicy(table / table.sum(axis=1, keepdims=True))
        qv = value_iteration(
            r, EmpiricalTransition(kind="tabular", probs=p), policy, 0.9, 7
        )
        np.testing.assert_allclose(
            qv.v_table, (policy.table * qv.q_table).sum(axis=1), atol=1e-8
        )


class TestDMValue:
    def test_zero_provider(self):
        assert dm_value(ZeroQV(), [{"s": 0.0}]) == 0.0

    def test_single_state(self):
        qv = value_iteration(
            np.array([[2.0]]),
            EmpiricalTransition(kind="tabular", probs=np.ones((1, 1, 1))),
            TabularPolicy(np.array([[1.0]])),
            gamma=0.5,
            iters=30,
        )
        assert dm_value(qv, [{"s": 0.0}]) == pytest.approx(qv.v({"s": 0.0}))

    def test_empty_sample_rejected(self):
        with pytest.raises(ValueError):
            dm_value(ZeroQV(), [])

    def test_matches_exact_value_on_tabular(self):
        rng = np.random.default_rng(7)
        p = rng.random((2, 2, 2))
        p /= p.sum(axis=2, keepdims=True)
        r = rng.random((2, 2))
        p0 = np.array([0.3, 0.7])
        gamma, horizon = 0.9, 25
        mdp = TabularMDP.deterministic_rewards(p, r, p0, gamma, horizon)
        policy = TabularPolicy(np.full((2, 2), 0.5))
        qv = value_iteration(
            r, EmpiricalTransition(kind="tabular", probs=p), policy, gamma, horizon
        )
        value = sum(p0[s] * qv.v({"s": float(s)}) for s in range(2))
        exact, _ = oracle.exact_value(mdp, policy)
        vmax = r.max() / (1 - gamma)
        assert abs(value - exact) <= gamma**horizon * vmax + 1e-9


class TestRecsimDM:
    def test_fit_and_query(self):
        world = recsim.generate_world(3, num_topics=8, num_docs=15, num_users=3)
        policy = recsim.initial_policy(world, 0)
        ds = recsim.collect(policy, world, 400, 10, seed=1)
        fitted = fit_recsim_dm(
            ds, world.doc_relevance, world.num_users, gamma=0.9, iters=5,
            max_trajectories=300,
        )
        target = recsim.BoundPolicy(policy, world)
        qv = recsim_qv(fitted, world.doc_relevance, target)
        obs = ds.trajectories[0].steps[0].obs
        q = qv.q(obs, 3)
        v = qv.v(obs)
        assert np.isfinite(q) and np.isfinite(v)
        # consistency: v = sum_a pi(a|s) q(s, a)
        probs = recsim.policy_probs(policy, obs, world)
        q_all = [qv.q(obs, a) for a in range(world.num_docs)]
        assert v == pytest.approx(float(probs @ q_all), abs=1e-8)

    def test_serialization_dict(self):
        world = recsim.generate_world(4, num_topics=6, num_docs=10, num_users=2)
        policy = recsim.initial_policy(world, 1)
        ds = recsim.collect(policy, world, 150, 8, seed=2)
        fitted = fit_recsim_dm(ds, world.doc_relevance, world.num_users, gamma=0.8, iters=3)
        blob = fitted.to_json_dict()
        assert blob["iters"] == 3
        assert len(blob["reward_model"]["weights"]) > 0
