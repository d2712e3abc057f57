"""Trajectory data model, dataset I/O, importance ratios, and half-splitting.

Logged data is grouped by the behavior policy that produced it.  Observations
are opaque records (mappings from feature names to scalars or flat numeric
lists) so that tabular test environments and the recommender simulator share
one on-disk format.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Protocol, Sequence

import numpy as np

Obs = Mapping[str, Any]


class DataFormatError(ValueError):
    """A trajectory file does not follow the JSONL schema."""


class ValidationError(ValueError):
    """A logged record violates a structural invariant."""


class SupportViolationError(ValueError):
    """The target policy puts zero probability on a logged action."""


class TargetPolicy(Protocol):
    """Anything that scores action probabilities for an observation."""

    def prob(self, obs: Obs, action: int) -> float: ...


@dataclass(frozen=True)
class Step:
    """One logged interaction: observation, action, reward, and the
    probability the logging policy assigned to the taken action."""

    obs: Obs
    action: int
    reward: float
    behavior_prob: float

    def __post_init__(self):
        if not (self.behavior_prob > 0.0):
            raise ValidationError(
                "behavior_prob must be > 0: every logged action needs positive "
                f"propensity under its logging policy (got {self.behavior_prob})"
            )
        if self.behavior_prob > 1.0 + 1e-9:
            raise ValidationError(f"behavior_prob must be <= 1 (got {self.behavior_prob})")
        if self.action < 0:
            raise ValidationError(f"action must be a non-negative index (got {self.action})")


@dataclass(frozen=True)
class Trajectory:
    steps: tuple[Step, ...]

    def __post_init__(self):
        if len(self.steps) < 1:
            raise ValidationError("a trajectory needs at least one step")

    @property
    def length(self) -> int:
        return len(self.steps)


@dataclass(frozen=True)
class StepArrays:
    """Padded array view of a dataset, shared by the vectorized estimators.

    ``obs_ids`` indexes into ``unique_obs``; entries past a trajectory's
    length are padding and must be gated by ``lengths``.
    """

    lengths: np.ndarray  # (n,) int
    actions: np.ndarray  # (n, L) int
    rewards: np.ndarray  # (n, L) float
    behavior_probs: np.ndarray  # (n, L) float, padded with 1.0
    obs_ids: np.ndarray  # (n, L) int, padded with 0
    unique_obs: tuple[Obs, ...]


def _obs_key(obs: Obs) -> str:
    return json.dumps(_obs_jsonable(obs), sort_keys=True)


def _build_step_arrays(trajectories: Sequence[Trajectory]) -> StepArrays:
    n = len(trajectories)
    lengths = np.array([t.length for t in trajectories], dtype=np.int64)
    max_len = int(lengths.max()) if n else 0
    actions = np.zeros((n, max_len), dtype=np.int64)
    rewards = np.zeros((n, max_len))
    probs = np.ones((n, max_len))
    obs_ids = np.zeros((n, max_len), dtype=np.int64)
    unique: dict[str, int] = {}
    unique_obs: list[Obs] = []
    for j, traj in enumerate(trajectories):
        for t, step in enumerate(traj.steps):
            key = _obs_key(step.obs)
            idx = unique.get(key)
            if idx is None:
                idx = len(unique_obs)
                unique[key] = idx
                unique_obs.append(step.obs)
            obs_ids[j, t] = idx
            actions[j, t] = step.action
            rewards[j, t] = step.reward
            probs[j, t] = step.behavior_prob
    return StepArrays(
        lengths=lengths,
        actions=actions,
        rewards=rewards,
        behavior_probs=probs,
        obs_ids=obs_ids,
        unique_obs=tuple(unique_obs),
    )


@dataclass(frozen=True)
class BehaviorDataset:
    """All trajectories logged by one behavior policy."""

    policy_id: str
    trajectories: tuple[Trajectory, ...]
    split_role: str | None = None  # None | "variance" | "value"
    arrays: StepArrays | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if len(self.trajectories) < 1:
            raise ValidationError(f"dataset {self.policy_id!r}: no trajectories")

    @property
    def n(self) -> int:
        return len(self.trajectories)

    @property
    def horizon_max(self) -> int:
        return max(t.length for t in self.trajectories) - 1

    def step_arrays(self) -> StepArrays:
        """Array view, built lazily and cached on first use."""
        if self.arrays is None:
            object.__setattr__(self, "arrays", _build_step_arrays(self.trajectories))
        return self.arrays


@dataclass(frozen=True)
class MultiDataset:
    """Datasets from M behavior policies over a shared environment."""

    datasets: tuple[BehaviorDataset, ...]

    def __post_init__(self):
        if len(self.datasets) < 1:
            raise ValidationError("need at least one behavior dataset")

    @property
    def m(self) -> int:
        return len(self.datasets)

    @property
    def horizon_max(self) -> int:
        return max(ds.horizon_max for ds in self.datasets)

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(ds.n for ds in self.datasets)


@dataclass(frozen=True)
class ValidationConfig:
    """Bounds checked by validate(): |reward| <= reward_bound and
    behavior_prob >= min_prob.  ratio_bound is the cap enforced at
    ratio-computation time through the clip threshold."""

    reward_bound: float = math.inf
    ratio_bound: float = math.inf
    min_prob: float = 1e-12

    def __post_init__(self):
        if self.reward_bound <= 0 or self.ratio_bound <= 0 or self.min_prob <= 0:
            raise ValueError("all validation bounds must be positive")


@dataclass(frozen=True)
class Violation:
    policy_id: str
    trajectory: int
    step: int
    kind: str  # "reward_bound" | "min_prob"
    value: float
    bound: float


def validate(ds: MultiDataset, cfg: ValidationConfig) -> list[Violation]:
    """Report every step violating the configured bounds; empty means pass."""
    out: list[Violation] = []
    for bd in ds.datasets:
        for j, traj in enumerate(bd.trajectories):
            for t, step in enumerate(traj.steps):
                if abs(step.reward) > cfg.reward_bound:
                    out.append(
                        Violation(bd.policy_id, j, t, "reward_bound", step.reward, cfg.reward_bound)
                    )
                if step.behavior_prob < cfg.min_prob:
                    out.append(
                        Violation(bd.policy_id, j, t, "min_prob", step.behavior_prob, cfg.min_prob)
                    )
    return out


@dataclass(frozen=True)
class RatioVector:
    """Cumulative importance ratios for one trajectory.

    ``rho[t]`` is the (possibly clipped) cumulative product of per-step
    target/behavior probability ratios through step t, with the convention
    rho[-1] = 1.  When a clip threshold is active the cumulative value is
    capped at every step and later entries grow from the capped value:
    rho[t] = min(rho[t-1] * step_ratios[t], clip).
    """

    rho: np.ndarray
    step_ratios: np.ndarray

    @property
    def rho_prev(self) -> np.ndarray:
        """rho shifted right by one, starting from rho[-1] = 1."""
        return np.concatenate(([1.0], self.rho[:-1]))


def importance_ratios(
    traj: Trajectory, target: TargetPolicy, clip: float | None = None
) -> RatioVector:
    """Cumulative target/behavior probability ratios for one trajectory."""
    steps = np.empty(traj.length)
    for t, step in enumerate(traj.steps):
        p = float(target.prob(step.obs, step.action))
        if p <= 0.0:
            raise SupportViolationError(
                f"target policy assigns probability {p} to logged action "
                f"{step.action} at step {t}"
            )
        steps[t] = p / step.behavior_prob
    rho = np.empty_like(steps)
    prev = 1.0
    for t in range(len(steps)):
        value = prev * steps[t]
        if clip is not None:
            value = min(value, clip)
        rho[t] = value
        prev = value
    return RatioVector(rho=rho, step_ratios=steps)


def half_split(ds: BehaviorDataset, seed: int) -> tuple[BehaviorDataset, BehaviorDataset]:
    """Deterministic seeded partition into a variance half (ceil(n/2)) and a
    value half (floor(n/2))."""
    if ds.n < 2:
        raise ValidationError(f"dataset {ds.policy_id!r}: cannot split {ds.n} trajectory")
    perm = np.random.default_rng(seed).permutation(ds.n)
    cut = (ds.n + 1) // 2
    var_idx, val_idx = np.sort(perm[:cut]), np.sort(perm[cut:])

    def take(indices: np.ndarray, role: str) -> BehaviorDataset:
        trajs = tuple(ds.trajectories[i] for i in indices)
        arrays = None
        if ds.arrays is not None:
            a = ds.arrays
            max_len = int(a.lengths[indices].max())
            arrays = StepArrays(
                lengths=a.lengths[indices],
                actions=a.actions[indices, :max_len],
                rewards=a.rewards[indices, :max_len],
                behavior_probs=a.behavior_probs[indices, :max_len],
                obs_ids=a.obs_ids[indices, :max_len],
                unique_obs=a.unique_obs,
            )
        return BehaviorDataset(ds.policy_id, trajs, split_role=role, arrays=arrays)

    return take(var_idx, "variance"), take(val_idx, "value")


def split_multidataset(md: MultiDataset, seed: int) -> tuple[MultiDataset, MultiDataset]:
    """Half-split every behavior dataset with a shared seed."""
    halves = [half_split(ds, seed) for ds in md.datasets]
    return (
        MultiDataset(tuple(h[0] for h in halves)),
        MultiDataset(tuple(h[1] for h in halves)),
    )


def _step_from_record(rec: Mapping[str, Any]) -> Step:
    try:
        return Step(
            obs=rec["obs"],
            action=int(rec["action"]),
            reward=float(rec["reward"]),
            behavior_prob=float(rec["behavior_prob"]),
        )
    except KeyError as exc:
        raise DataFormatError(f"step record is missing field {exc.args[0]!r}") from exc


def load_multidataset(path) -> MultiDataset:
    """Read a JSON Lines trajectory file, grouping by policy_id in file order."""
    groups: dict[str, list[Trajectory]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                policy_id = str(rec["policy_id"])
                steps = tuple(_step_from_record(s) for s in rec["steps"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataFormatError(f"{path}: line {lineno}: {exc}") from exc
            except ValidationError as exc:
                raise ValidationError(f"{path}: line {lineno}: {exc}") from exc
            groups.setdefault(policy_id, []).append(Trajectory(steps))
    if not groups:
        raise DataFormatError(f"{path}: no trajectories")
    return MultiDataset(
        tuple(BehaviorDataset(pid, tuple(trajs)) for pid, trajs in groups.items())
    )


def _obs_jsonable(obs: Obs) -> dict:
    out = {}
    for key, value in obs.items():
        if isinstance(value, np.ndarray):
            out[key] = [float(v) for v in value]
        elif isinstance(value, (list, tuple)):
            out[key] = [float(v) for v in value]
        elif isinstance(value, (np.floating, np.integer)):
            out[key] = float(value)
        else:
            out[key] = value
    return out


def save_multidataset(md: MultiDataset | BehaviorDataset, path) -> None:
    """Write trajectories in the JSONL format read by load_multidataset."""
    datasets: Iterable[BehaviorDataset]
    datasets = md.datasets if isinstance(md, MultiDataset) else (md,)
    with open(path, "w", encoding="utf-8") as fh:
        for bd in datasets:
            for traj in bd.trajectories:
                rec = {
                    "policy_id": bd.policy_id,
                    "steps": [
                        {
                            "obs": _obs_jsonable(s.obs),
                            "action": int(s.action),
                            "reward": float(s.reward),
                            "behavior_prob": float(s.behavior_prob),
                        }
                        for s in traj.steps
                    ],
                }
                fh.write(json.dumps(rec) + "\n")
