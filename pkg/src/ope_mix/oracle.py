"""Small tabular MDPs with exact values and brute-force estimator oracles.

These are test instruments: finite-horizon MDPs whose values come from
backward/forward dynamic programming, and whose estimator sampling
distributions can be computed exactly by enumerating every trajectory.
Rewards have finite support so enumeration stays exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import BehaviorDataset, Obs, Step, StepArrays, Trajectory


class EnumerationTooLarge(ValueError):
    """The trajectory space exceeds the enumeration cap."""


@dataclass(frozen=True)
class TabularPolicy:
    """Tabular policy over observations of the form {"s": state_index}."""

    table: np.ndarray  # (S, A), rows sum to 1

    def prob(self, obs: Obs, action: int) -> float:
        return float(self.table[int(obs["s"]), action])

    def action_probs_many(self, obs_seq) -> np.ndarray:
        states = np.array([int(o["s"]) for o in obs_seq])
        return self.table[states]


@dataclass(frozen=True)
class TabularMDP:
    """Finite-horizon MDP with finite-support stochastic rewards.

    ``reward_values``/``reward_probs`` have shape (S, A, V): taking action a
    in state s draws reward_values[s, a, k] with probability
    reward_probs[s, a, k].  Episodes run for exactly ``horizon`` steps.
    """

    transitions: np.ndarray  # (S, A, S)
    reward_values: np.ndarray  # (S, A, V)
    reward_probs: np.ndarray  # (S, A, V)
    initial: np.ndarray  # (S,)
    gamma: float
    horizon: int

    def __post_init__(self):
        for name, dist, axis in (
            ("transitions", self.transitions, 2),
            ("reward_probs", self.reward_probs, 2),
        ):
            sums = dist.sum(axis=axis)
            if not np.allclose(sums, 1.0, atol=1e-12):
                raise ValueError(f"{name} rows must sum to 1")
        if not np.isclose(self.initial.sum(), 1.0, atol=1e-12):
            raise ValueError("initial distribution must sum to 1")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    @property
    def num_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transitions.shape[1]

    @property
    def mean_rewards(self) -> np.ndarray:
        return (self.reward_values * self.reward_probs).sum(axis=2)

    @staticmethod
    def deterministic_rewards(
        transitions, rewards, initial, gamma: float, horizon: int
    ) -> "TabularMDP":
        r = np.asarray(rewards, dtype=float)[..., None]
        return TabularMDP(
            transitions=np.asarray(transitions, dtype=float),
            reward_values=r,
            reward_probs=np.ones_like(r),
            initial=np.asarray(initial, dtype=float),
            gamma=gamma,
            horizon=horizon,
        )

    @staticmethod
    def from_json(path) -> "TabularMDP":
        with open(path, "r", encoding="utf-8") as fh:
            spec = json.load(fh)
        r = spec["R"]
        if isinstance(r, dict):
            values, probs = np.asarray(r["values"], float), np.asarray(r["probs"], float)
        else:
            values = np.asarray(r, dtype=float)[..., None]
            probs = np.ones_like(values)
        return TabularMDP(
            transitions=np.asarray(spec["P"], dtype=float),
            reward_values=values,
            reward_probs=probs,
            initial=np.asarray(spec["P0"], dtype=float),
            gamma=float(spec["gamma"]),
            horizon=int(spec["H"]),
        )


def state_obs(state: int) -> Obs:
    return {"s": float(state)}


def exact_value(mdp: TabularMDP, policy: TabularPolicy) -> tuple[float, np.ndarray]:
    """Exact target value and the per-horizon mean rewards.

    Returns (V, per_t) where per_t[t] is the undiscounted expected reward at
    step t under the policy and V = sum_t gamma^t per_t[t].
    """
    dist = mdp.initial.copy()
    per_t = np.zeros(mdp.horizon)
    r_mean = mdp.mean_rewards
    for t in range(mdp.horizon):
        occupancy = dist[:, None] * policy.table
        per_t[t] = (occupancy * r_mean).sum()
        dist = np.einsum("sa,sau->u", occupancy, mdp.transitions)
    value = float((mdp.gamma ** np.arange(mdp.horizon) * per_t).sum())
    return value, per_t


def enumerate_estimator_distribution(
    mdp: TabularMDP,
    behavior: TabularPolicy,
    target: TabularPolicy,
    estimator_fn,
    n: int = 1,
    max_paths: int = 1_000_000,
) -> tuple[float, float]:
    """Exact mean and n-sample variance of a per-trajectory estimator.

    Enumerates every positive-probability length-H trajectory under the
    behavior policy and applies ``estimator_fn`` (Trajectory -> float) to
    each.  For estimators that average independent per-trajectory
    contributions, the variance over an n-trajectory dataset is the
    single-trajectory variance divided by n.
    """
    obs_cache = [state_obs(s) for s in range(mdp.num_states)]
    mean = 0.0
    second = 0.0
    leaves = 0

    def recurse(t: int, state: int, prob: float, steps: list[Step]):
        nonlocal mean, second, leaves
        if t == mdp.horizon:
            leaves += 1
            if leaves > max_paths:
                raise EnumerationTooLarge(
                    f"trajectory space exceeds {max_paths} paths"
                )
            g = float(estimator_fn(Trajectory(tuple(steps))))
            mean += prob * g
            second += prob * g * g
            return
        for a in range(mdp.num_actions):
            pa = behavior.table[state, a]
            if pa == 0.0:
                continue
            for k in range(mdp.reward_values.shape[2]):
                pr = mdp.reward_probs[state, a, k]
                if pr == 0.0:
                    continue
                step = Step(
                    obs=obs_cache[state],
                    action=a,
                    reward=float(mdp.reward_values[state, a, k]),
                    behavior_prob=float(pa),
                )
                steps.append(step)
                for s2 in range(mdp.num_states):
                    ps = mdp.transitions[state, a, s2]
                    if ps == 0.0:
                        continue
                    recurse(t + 1, s2, prob * pa * pr * ps, steps)
                steps.pop()

    for s0 in range(mdp.num_states):
        if mdp.initial[s0] > 0.0:
            recurse(0, s0, float(mdp.initial[s0]), [])
    variance = second - mean * mean
    return mean, variance / n


def _rowwise_choice(prob_rows: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    cum = np.cumsum(prob_rows, axis=1)
    idx = (uniforms[:, None] * cum[:, -1:] > cum).sum(axis=1)
    return np.minimum(idx, prob_rows.shape[1] - 1)


def sample_dataset(
    mdp: TabularMDP,
    policy: TabularPolicy,
    n: int,
    seed: int,
    policy_id: str = "b",
) -> BehaviorDataset:
    """Sample n independent length-H trajectories under a tabular policy."""
    rng = np.random.default_rng(seed)
    h = mdp.horizon
    states = np.empty((n, h), dtype=np.int64)
    actions = np.empty((n, h), dtype=np.int64)
    rewards = np.empty((n, h))
    probs = np.empty((n, h))
    cur = _rowwise_choice(np.broadcast_to(mdp.initial, (n, mdp.num_states)), rng.random(n))
    for t in range(h):
        states[:, t] = cur
        actions[:, t] = _rowwise_choice(policy.table[cur], rng.random(n))
        probs[:, t] = policy.table[cur, actions[:, t]]
        rewards[:, t] = mdp.reward_values[
            cur, actions[:, t],
            _rowwise_choice(mdp.reward_probs[cur, actions[:, t]], rng.random(n)),
        ]
        cur = _rowwise_choice(mdp.transitions[cur, actions[:, t]], rng.random(n))

    obs_cache = [state_obs(s) for s in range(mdp.num_states)]
    trajectories = tuple(
        Trajectory(
            tuple(
                Step(
                    obs=obs_cache[states[j, t]],
                    action=int(actions[j, t]),
                    reward=float(rewards[j, t]),
                    behavior_prob=float(probs[j, t]),
                )
                for t in range(h)
            )
        )
        for j in range(n)
    )
    arrays = StepArrays(
        lengths=np.full(n, h, dtype=np.int64),
        actions=actions,
        rewards=rewards,
        behavior_probs=probs,
        obs_ids=states,
        unique_obs=tuple(obs_cache),
    )
    return BehaviorDataset(policy_id, trajectories, arrays=arrays)
