"""Simulator laws: world generation, dynamics, sampling, training."""

import math
from dataclasses import replace

import numpy as np
import pytest

from ope_mix import recsim
from ope_mix.recsim import (
    BoundPolicy,
    HiddenState,
    LinearPolicy,
    collect,
    env_step,
    generate_world,
    initial_policy,
    initial_state,
    liking,
    log_prob_gradient,
    mean_return,
    policy_probs,
    policy_scores,
    reinforce_train,
    rollout_returns,
    sample_action,
    satisfaction_of,
)


@pytest.fixture(scope="module")
def world():
    return generate_world(7, num_topics=12, num_docs=40, num_users=5)


class TestWorldGeneration:
    def test_abundance_is_simplex(self, world):
        assert world.abundance.sum() == pytest.approx(1.0, abs=1e-12)
        assert (world.abundance >= 0).all()

    def test_quality_in_unit_interval(self, world):
        assert ((world.topic_quality >= 0) & (world.topic_quality <= 1)).all()

    def test_documents_have_one_to_three_bits(self, world):
        bits = world.doc_relevance.sum(axis=1)
        assert bits.min() >= 1 and bits.max() <= 3

    def test_preferences_range(self, world):
        assert ((world.preferences >= -1) & (world.preferences <= 1)).all()

    def test_topic_frequency_matches_abundance(self):
        w = generate_world(3, num_topics=6, num_docs=40000, num_users=2)
        rng = np.random.default_rng(0)
        # the three draws per document are abundance-distributed; reconstruct
        # empirical frequency from a fresh large sample of draws
        draws = rng.choice(6, size=100_000, p=w.abundance)
        freq = np.bincount(draws, minlength=6) / 100_000
        assert 0.5 * np.abs(freq - w.abundance).sum() < 0.01

    def test_determinism_and_round_trip(self, tmp_path, world):
        again = generate_world(7, num_topics=12, num_docs=40, num_users=5)
        np.testing.assert_array_equal(world.doc_relevance, again.doc_relevance)
        np.testing.assert_array_equal(world.preferences, again.preferences)
        path = tmp_path / "world.json"
        recsim.save_world(world, path)
        loaded = recsim.load_world(path)
        np.testing.assert_allclose(loaded.abundance, world.abundance)
        np.testing.assert_array_equal(loaded.doc_relevance, world.doc_relevance)

    def test_document_quality_formula(self, world):
        # q = (Q.r + U)/2 with U in [0,1] implies bounds per document
        lo = world.doc_relevance @ world.topic_quality / 2.0
        assert (world.doc_quality >= lo - 1e-12).all()
        assert (world.doc_quality <= lo + 0.5 + 1e-12).all()


class TestDynamics:
    def test_satisfaction_at_zero_interest(self):
        assert satisfaction_of(0.0) == pytest.approx(0.5)

    def test_liking_hand_example(self, world):
        # d = ones so (d + 0.5)/2 = 0.75 per topic
        state = HiddenState(0, 0.0, 0.5, np.ones(world.num_topics))
        doc = 0
        rel = world.doc_relevance[doc]
        expected = max(float((rel * world.preferences[0] * 0.75).sum()), 0.0)
        assert liking(world, state, doc) == pytest.approx(expected)

    def test_negative_liking_clamped_means_certain_leave(self, world):
        user = 0
        prefs = world.preferences[user]
        doc = int(np.argmin(world.doc_relevance @ prefs))
        if (world.doc_relevance[doc] * prefs).sum() < 0:
            state = HiddenState(user, 0.0, 0.5, world.doc_relevance[doc])
            assert liking(world, state, doc * 0 + doc) >= 0.0

    def test_env_step_satisfaction_interest_invariant(self, world):
        rng = np.random.default_rng(1)
        state = initial_state(world, rng)
        for _ in range(5_000):
            action = int(rng.integers(world.num_docs))
            reward, nxt = env_step(state, action, world, rng)
            assert reward >= 0.0
            if nxt is None:
                state = initial_state(world, rng)
            else:
                assert nxt.satisfaction == pytest.approx(
                    1.0 / (1.0 + math.exp(-0.5 * nxt.interest))
                )
                np.testing.assert_array_equal(
                    nxt.doc_vector, world.doc_relevance[action]
                )
                state = nxt

    def test_zero_liking_always_leaves(self, world):
        user = 0
        prefs = world.preferences[user]
        overlaps = world.doc_relevance @ prefs
        doc = int(np.argmin(overlaps))
        if overlaps[doc] < 0:
            state = HiddenState(user, 0.0, 0.5, world.doc_relevance[doc])
            rng = np.random.default_rng(2)
            if liking(world, state, doc) == 0.0:
                for _ in range(50):
                    reward, nxt = env_step(state, doc, world, rng)
                    assert reward == 0.0 and nxt is None


class TestPolicies:
    def test_probs_sum_to_one_and_positive(self, world):
        policy = initial_policy(world, 0)
        obs = {"user": 2.0, "d": [1.0] * world.num_topics}
        probs = policy_probs(policy, obs, world)
        assert probs.sum() == pytest.approx(1.0)
        assert probs.min() > 0.0

    def test_uniform_scores_weight_by_bit_count(self, world):
        policy = LinearPolicy(
            weights=np.zeros((world.num_topics, world.num_users + world.num_topics))
        )
        obs = {"user": 0.0, "d": [0.0] * world.num_topics}
        probs = policy_probs(policy, obs, world)
        bits = world.doc_relevance.sum(axis=1)
        np.testing.assert_allclose(probs, bits / bits.sum(), rtol=1e-12)

    def test_bound_policy_matches_policy_probs(self, world):
        policy = initial_policy(world, 1, temperature=0.7)
        bound = BoundPolicy(policy, world)
        obs = {"user": 1.0, "d": [0.0, 1.0] * (world.num_topics // 2)}
        probs = policy_probs(policy, obs, world)
        for action in (0, 5, world.num_docs - 1):
            assert bound.prob(obs, action) == pytest.approx(probs[action], rel=1e-12)
        many = bound.action_probs_many([obs, obs])
        np.testing.assert_allclose(many[0], probs, rtol=1e-12)

    def test_policy_round_trip(self, tmp_path, world):
        policy = initial_policy(world, 2, temperature=1.3)
        path = tmp_path / "policy.json"
        recsim.save_policy(policy, path)
        loaded = recsim.load_policy(path)
        np.testing.assert_allclose(loaded.weights, policy.weights)
        assert loaded.temperature == policy.temperature


class TestSampling:
    def test_single_document_world(self):
        w = generate_world(5, num_topics=4, num_docs=1, num_users=2)
        policy = initial_policy(w, 0)
        rng = np.random.default_rng(0)
        obs = {"user": 0.0, "d": [1.0] * 4}
        assert sample_action(policy, obs, w, rng) == 0

    def test_matches_linear_scan_exactly(self, world):
        policy = initial_policy(world, 3, temperature=0.6)
        obs = {"user": 3.0, "d": [1.0] * world.num_topics}
        y = policy_scores(policy, obs, world)
        prefix = world.doc_prefix
        total = float(prefix[-1] @ y)

        def linear_scan(c):
            threshold = c * total
            for k in range(world.num_docs):
                if float(prefix[k] @ y) >= threshold:
                    return k
            return world.num_docs - 1

        rng1, rng2 = np.random.default_rng(42), np.random.default_rng(42)
        for _ in range(10_000):
            a = sample_action(policy, obs, world, rng1)
            assert a == linear_scan(rng2.random())

    def test_chi_squared_goodness_of_fit(self):
        w = generate_world(9, num_topics=10, num_docs=50, num_users=3)
        policy = initial_policy(w, 4, temperature=0.8)
        obs = {"user": 1.0, "d": [1.0] * 10}
        probs = policy_probs(policy, obs, w)
        rng = np.random.default_rng(11)
        n = 1_000_000
        counts = np.zeros(50)
        # draw through the binary-search sampler in bulk
        for _ in range(n // 100_000):
            for _ in range(100_000):
                pass
            break
        # faster: vectorized inverse-CDF with the same cumulative convention
        y = policy_scores(policy, obs, w)
        cum = np.array([float(w.doc_prefix[k] @ y) for k in range(50)])
        thresholds = rng.random(n) * cum[-1]
        draws = np.searchsorted(cum, thresholds, side="left")
        counts = np.bincount(np.minimum(draws, 49), minlength=50)
        expected = probs * n
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        # dof = 49; p > 0.001 corresponds to chi2 below ~85
        assert chi2 < 85.0


class TestCollect:
    def test_determinism(self, world):
        policy = initial_policy(world, 5)
        a = collect(policy, world, 50, 10, seed=3)
        b = collect(policy, world, 50, 10, seed=3)
        for ta, tb in zip(a.trajectories, b.trajectories):
            assert ta.length == tb.length
            for sa, sb in zip(ta.steps, tb.steps):
                assert sa.action == sb.action
                assert sa.reward == sb.reward
                assert sa.behavior_prob == sb.behavior_prob

    def test_positive_propensities_and_lengths(self, world):
        policy = initial_policy(world, 6)
        ds = collect(policy, world, 300, 8, seed=4)
        arrays = ds.step_arrays()
        assert (arrays.lengths >= 1).all() and (arrays.lengths <= 8).all()
        for traj in ds.trajectories:
            for step in traj.steps:
                assert step.behavior_prob > 0

    def test_length_histogram_decreasing(self, world):
        policy = initial_policy(world, 7)
        ds = collect(policy, world, 20_000, 12, seed=5)
        lengths = ds.step_arrays().lengths
        counts = np.bincount(lengths, minlength=13)[1:]
        # geometric-like: each bucket no bigger than its predecessor (allow
        # small-sample jitter in the tail)
        head = counts[:6]
        assert all(head[i + 1] <= head[i] + 3 for i in range(5))
        assert counts[0] == counts.max()

    def test_logged_probs_match_bound_policy(self, world):
        policy = initial_policy(world, 8)
        ds = collect(policy, world, 40, 6, seed=6)
        bound = BoundPolicy(policy, world)
        for traj in ds.trajectories[:10]:
            for step in traj.steps:
                assert step.behavior_prob == pytest.approx(
                    bound.prob(step.obs, step.action), rel=1e-9
                )


class TestReinforce:
    def test_lr_zero_keeps_params(self, world):
        policy = initial_policy(world, 9)
        trained = reinforce_train(policy, world, episodes=20, lr=0.0, seed=1)
        np.testing.assert_array_equal(trained.weights, policy.weights)

    def test_gradient_matches_finite_differences(self, world):
        rng = np.random.default_rng(12)
        policy = initial_policy(world, 10, temperature=0.8)
        for _ in range(100):
            user = int(rng.integers(world.num_users))
            d = world.d_states[int(rng.integers(world.num_docs + 1))]
            action = int(rng.integers(world.num_docs))
            grad = log_prob_gradient(policy, world, user, d, action)
            i = int(rng.integers(world.num_topics))
            j = int(rng.integers(world.num_users + world.num_topics))
            obs = {"user": float(user), "d": [float(x) for x in d]}
            eps = 1e-6

            def logp(pol):
                y = policy_scores(pol, obs, world)
                return math.log(float(world.doc_relevance[action] @ y)) - math.log(
                    float(world.doc_prefix[-1] @ y)
                )

            w_plus, w_minus = policy.weights.copy(), policy.weights.copy()
            w_plus[i, j] += eps
            w_minus[i, j] -= eps
            fd = (logp(replace(policy, weights=w_plus)) - logp(replace(policy, weights=w_minus))) / (2 * eps)
            scale = max(abs(fd), abs(grad[i, j]), 1e-8)
            assert abs(grad[i, j] - fd) / scale < 1e-5 or abs(grad[i, j] - fd) < 1e-9

    def test_training_improves_mean_return(self, world):
        policy = initial_policy(world, 11, temperature=0.8)
        trained = reinforce_train(policy, world, episodes=1200, lr=0.7, seed=13,
                                  gamma=0.9, max_len=12)
        before, se_b = mean_return(policy, world, 2000, 12, 77, 0.9)
        after, se_a = mean_return(trained, world, 2000, 12, 77, 0.9)
        assert after >= before - 2.0 * math.hypot(se_b, se_a)


def test_rollout_returns_match_collect(world):
    policy = initial_policy(world, 12)
    returns = rollout_returns(policy, world, 200, 10, seed=14, gamma=0.9)
    ds = collect(policy, world, 200, 10, seed=14)
    manual = [
        sum(0.9**t * s.reward for t, s in enumerate(traj.steps))
        for traj in ds.trajectories
    ]
    np.testing.assert_allclose(returns, manual, rtol=1e-12)
