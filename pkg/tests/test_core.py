"""Data model, JSONL round-trips, ratios, and half-splitting."""

import json
import math

import numpy as np
import pytest

from ope_mix import core
from ope_mix.core import (
    BehaviorDataset,
    DataFormatError,
    MultiDataset,
    Step,
    SupportViolationError,
    Trajectory,
    ValidationConfig,
    ValidationError,
)


class ConstantPolicy:
    """prob(obs, action) is a fixed table lookup on the action only."""

    def __init__(self, probs):
        self.probs = probs

    def prob(self, obs, action):
        return self.probs[action]


def make_traj(rewards, probs, actions=None):
    actions = actions or [0] * len(rewards)
    return Trajectory(
        tuple(
            Step(obs={"s": 0.0}, action=a, reward=r, behavior_prob=p)
            for r, p, a in zip(rewards, probs, actions)
        )
    )


class TestDataModel:
    def test_zero_propensity_rejected(self):
        with pytest.raises(ValidationError, match="behavior_prob"):
            Step(obs={}, action=0, reward=0.0, behavior_prob=0.0)

    def test_empty_trajectory_rejected(self):
        with pytest.raises(ValidationError):
            Trajectory(())

    def test_horizon_max(self):
        ds = BehaviorDataset("b", (make_traj([1, 1], [0.5, 0.5]), make_traj([1], [0.5])))
        md = MultiDataset((ds,))
        assert md.horizon_max == 1
        assert md.counts == (2,)

    def test_step_arrays_padding(self):
        ds = BehaviorDataset("b", (make_traj([1.0, 2.0], [0.5, 0.25]), make_traj([3.0], [0.5])))
        arrays = ds.step_arrays()
        assert arrays.lengths.tolist() == [2, 1]
        assert arrays.rewards[1, 1] == 0.0
        assert arrays.behavior_probs[1, 1] == 1.0


class TestJsonl:
    def test_round_trip_identity(self, tmp_path):
        obs = {"user": 2.0, "d": [0.0, 1.0, 0.0]}
        traj = Trajectory(
            (
                Step(obs=obs, action=17, reward=1.42, behavior_prob=0.031),
                Step(obs=obs, action=3, reward=-0.5, behavior_prob=0.9),
            )
        )
        md = MultiDataset(
            (
                BehaviorDataset("p3", (traj,)),
                BehaviorDataset("p4", (make_traj([0.0], [1.0]),)),
            )
        )
        path = tmp_path / "data.jsonl"
        core.save_multidataset(md, path)
        loaded = core.load_multidataset(path)
        core.save_multidataset(loaded, tmp_path / "again.jsonl")
        assert (tmp_path / "again.jsonl").read_text() == path.read_text()
        assert loaded.m == 2
        assert loaded.datasets[0].policy_id == "p3"
        assert loaded.datasets[0].trajectories[0].steps[0].reward == 1.42
        assert loaded.datasets[0].trajectories[0].steps[0].obs["d"] == [0.0, 1.0, 0.0]

    def test_grouping_by_policy_in_file_order(self, tmp_path):
        path = tmp_path / "data.jsonl"
        rec = {"steps": [{"obs": {"s": 0.0}, "action": 0, "reward": 1.0, "behavior_prob": 0.5}]}
        with open(path, "w") as fh:
            for pid in ("b", "a", "b", "a", "a"):
                fh.write(json.dumps({"policy_id": pid, **rec}) + "\n")
        md = core.load_multidataset(path)
        assert [ds.policy_id for ds in md.datasets] == ["b", "a"]
        assert md.counts == (2, 3)

    def test_empty_file_errors(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        with pytest.raises(DataFormatError, match="no trajectories"):
            core.load_multidataset(path)

    def test_parse_error_carries_line_number(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"policy_id": "p", "steps": [}\n')
        with pytest.raises(DataFormatError, match="line 1"):
            core.load_multidataset(path)

    def test_zero_propensity_in_file(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        rec = {
            "policy_id": "p",
            "steps": [{"obs": {}, "action": 0, "reward": 0.0, "behavior_prob": 0.0}],
        }
        path.write_text(json.dumps(rec) + "\n")
        with pytest.raises(ValidationError, match="behavior_prob"):
            core.load_multidataset(path)


class TestImportanceRatios:
    def test_identity_when_target_equals_behavior(self):
        traj = make_traj([1.0, 1.0, 1.0], [0.3, 0.3, 0.3])
        rv = core.importance_ratios(traj, ConstantPolicy({0: 0.3}))
        np.testing.assert_allclose(rv.rho, [1.0, 1.0, 1.0])

    def test_cumulative_products(self):
        traj = make_traj([0.0, 0.0], [0.25, 0.2], actions=[0, 1])
        rv = core.importance_ratios(traj, ConstantPolicy({0: 0.5, 1: 0.6}))
        np.testing.assert_allclose(rv.rho, [2.0, 6.0])
        np.testing.assert_allclose(rv.rho_prev, [1.0, 2.0])

    def test_clip_caps_and_recurses_from_capped_value(self):
        # per-step ratios [2000, 2]: cap at t=0, then grow from the cap
        traj = make_traj([0.0, 0.0], [1.0 / 2000.0, 0.5], actions=[0, 1])
        rv = core.importance_ratios(traj, ConstantPolicy({0: 1.0, 1: 1.0}), clip=2000.0)
        np.testing.assert_allclose(rv.rho, [2000.0, 2000.0])
        # ratios [3000, 0.5]: raw cumulative would be [3000, 1500]; the
        # capped recursion gives [2000, 1000]
        traj = make_traj([0.0, 0.0], [1.0 / 3000.0, 1.0], actions=[0, 1])
        rv = core.importance_ratios(traj, ConstantPolicy({0: 1.0, 1: 0.5}), clip=2000.0)
        np.testing.assert_allclose(rv.rho, [2000.0, 1000.0])

    def test_support_violation(self):
        traj = make_traj([0.0], [0.5])
        with pytest.raises(SupportViolationError):
            core.importance_ratios(traj, ConstantPolicy({0: 0.0}))

    def test_step_ratio_consistency_unclipped(self):
        rng = np.random.default_rng(0)
        probs = rng.uniform(0.1, 1.0, size=8)
        target = ConstantPolicy({0: 0.7})
        rv = core.importance_ratios(make_traj(np.zeros(8), probs), target)
        for t in range(1, 8):
            assert rv.rho[t] / rv.rho[t - 1] == pytest.approx(rv.step_ratios[t])


class TestHalfSplit:
    def test_sizes_and_partition(self):
        ds = BehaviorDataset("b", tuple(make_traj([float(i)], [0.5]) for i in range(10)))
        var_half, val_half = core.half_split(ds, seed=0)
        assert (var_half.n, val_half.n) == (5, 5)
        assert var_half.split_role == "variance" and val_half.split_role == "value"
        rewards = sorted(
            t.steps[0].reward for t in var_half.trajectories + val_half.trajectories
        )
        assert rewards == [float(i) for i in range(10)]

    def test_ceiling_to_variance_half(self):
        ds = BehaviorDataset("b", tuple(make_traj([float(i)], [0.5]) for i in range(3)))
        var_half, val_half = core.half_split(ds, seed=1)
        assert (var_half.n, val_half.n) == (2, 1)

    def test_deterministic(self):
        ds = BehaviorDataset("b", tuple(make_traj([float(i)], [0.5]) for i in range(9)))
        a1 = core.half_split(ds, seed=42)
        a2 = core.half_split(ds, seed=42)
        assert [t.steps[0].reward for t in a1[0].trajectories] == [
            t.steps[0].reward for t in a2[0].trajectories
        ]

    def test_cannot_split_singleton(self):
        ds = BehaviorDataset("b", (make_traj([1.0], [0.5]),))
        with pytest.raises(ValidationError, match="split"):
            core.half_split(ds, seed=0)

    def test_partition_property_many_seeds(self):
        ds = BehaviorDataset("b", tuple(make_traj([float(i)], [0.5]) for i in range(11)))
        for seed in range(1000):
            var_half, val_half = core.half_split(ds, seed)
            ids = sorted(
                t.steps[0].reward for t in var_half.trajectories + val_half.trajectories
            )
            assert ids == [float(i) for i in range(11)]
            assert var_half.n == 6 and val_half.n == 5

    def test_split_slices_cached_arrays(self):
        ds = BehaviorDataset(
            "b", tuple(make_traj([float(i), 1.0], [0.5, 0.5]) for i in range(6))
        )
        ds.step_arrays()
        var_half, _ = core.half_split(ds, seed=3)
        assert var_half.arrays is not None
        np.testing.assert_array_equal(
            var_half.arrays.rewards[:, 0],
            [t.steps[0].reward for t in var_half.trajectories],
        )


class TestValidate:
    def test_clean_data_passes(self):
        md = MultiDataset((BehaviorDataset("b", (make_traj([0.5, -0.5], [0.5, 0.5]),)),))
        assert core.validate(md, ValidationConfig(reward_bound=1.0)) == []

    def test_reward_violation(self):
        md = MultiDataset((BehaviorDataset("b", (make_traj([2.0], [0.5]),)),))
        report = core.validate(md, ValidationConfig(reward_bound=1.0))
        assert len(report) == 1 and report[0].kind == "reward_bound"

    def test_min_prob_violation(self):
        md = MultiDataset((BehaviorDataset("b", (make_traj([0.0], [1e-12]),)),))
        report = core.validate(md, ValidationConfig(min_prob=1e-6))
        assert len(report) == 1 and report[0].kind == "min_prob"
        assert report[0].step == 0

    def test_bounds_must_be_positive(self):
        with pytest.raises(ValueError):
            ValidationConfig(reward_bound=-1.0)


def test_unlimited_defaults():
    cfg = ValidationConfig()
    assert math.isinf(cfg.reward_bound) and math.isinf(cfg.ratio_bound)
