"""Vanilla multi-policy value estimators and their per-policy components.

Six estimators cover the two weighting regimes: IS and DR keep the raw
rho/N weights, WIS and WDR self-normalize across all trajectories, and the
split variants SWIS and SWDR normalize inside each behavior policy's data
(which is what makes per-policy mixing possible).

Variable-length trajectories are treated as entering an absorbing
zero-reward state: beyond its last step a trajectory contributes reward 0
with its ratio frozen, and it drops out of the self-normalized weight
denominators.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .core import (
    BehaviorDataset,
    MultiDataset,
    StepArrays,
    SupportViolationError,
    TargetPolicy,
)

if TYPE_CHECKING:  # pragma: no cover
    from .direct_method import QVProvider


class DegenerateWeightsError(ValueError):
    """A self-normalized weight denominator vanished on live data."""


class Family(str, Enum):
    IS = "is"
    DR = "dr"
    SWIS = "swis"
    SWDR = "swdr"

    @property
    def uses_controls(self) -> bool:
        return self in (Family.DR, Family.SWDR)

    @property
    def self_normalized(self) -> bool:
        return self in (Family.SWIS, Family.SWDR)


@dataclass(frozen=True)
class DiscountConfig:
    """Discount factor and the maximum horizon index to sum over.

    horizon=None means "use the longest trajectory in the data".
    """

    gamma: float = 0.9
    horizon: int | None = None

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.horizon is not None and self.horizon < 0:
            raise ValueError("horizon must be >= 0")


@dataclass(frozen=True)
class PolicyTable:
    """Per-trajectory, per-horizon arrays for one behavior policy.

    All arrays are (n, T+1).  ``rew``, ``qval`` and ``vval`` carry the
    discount factor (gamma^t * reward etc.) and are zero past a trajectory's
    termination.  ``rho`` is the clipped cumulative importance ratio,
    ``rho_prev`` its shift with rho[-1] = 1, and ``dr_w`` is
    rho_prev * step_ratio, the weight the DR reward term keeps even when the
    cumulative ratio has been capped.
    """

    policy_id: str
    n: int
    horizon: int
    gamma: float
    split_role: str | None
    rho: np.ndarray
    rho_prev: np.ndarray
    dr_w: np.ndarray
    alive: np.ndarray
    alive_prev: np.ndarray
    rew: np.ndarray
    qval: np.ndarray
    vval: np.ndarray

    def u_weights(self) -> np.ndarray:
        """Within-policy self-normalized weights u[j, t].

        Finished trajectories keep their frozen cumulative ratio in the
        denominator (the absorbing state has per-step ratio 1), which keeps
        the self-normalized per-horizon components consistent for the
        unconditional value at t.
        """
        denom = self.rho.sum(axis=0)
        return np.divide(self.rho, denom, out=np.zeros_like(self.rho), where=denom > 0)

    def u_prev_weights(self) -> np.ndarray:
        """Self-normalized weights on rho_prev; u_prev[j, 0] = 1/n."""
        denom = self.rho_prev.sum(axis=0)
        return np.divide(
            self.rho_prev, denom, out=np.zeros_like(self.rho_prev), where=denom > 0
        )


def _target_prob_matrix(
    target: TargetPolicy, arrays: StepArrays, alive: np.ndarray, policy_id: str
) -> np.ndarray:
    """Probability of each logged action under the target policy, per step."""
    if hasattr(target, "action_probs_many"):
        probs_by_obs = np.asarray(target.action_probs_many(arrays.unique_obs))
        tprob = probs_by_obs[arrays.obs_ids, arrays.actions]
    else:
        tprob = np.ones_like(arrays.rewards)
        for j in range(arrays.rewards.shape[0]):
            for t in range(int(arrays.lengths[j])):
                tprob[j, t] = target.prob(arrays.unique_obs[arrays.obs_ids[j, t]],
                                          int(arrays.actions[j, t]))
    bad = alive & ~(tprob > 0.0)
    if bad.any():
        j, t = np.argwhere(bad)[0]
        raise SupportViolationError(
            f"policy {policy_id!r}: target assigns probability "
            f"{tprob[j, t]:.3g} to logged action {int(arrays.actions[j, t])} "
            f"(trajectory {int(j)}, step {int(t)})"
        )
    return tprob


def _qv_matrices(qv, arrays: StepArrays) -> tuple[np.ndarray, np.ndarray]:
    """Q(s_t, a_t) and V(s_t) at every logged step."""
    if hasattr(qv, "q_matrix") and hasattr(qv, "v_many"):
        q_by_obs = np.asarray(qv.q_matrix(arrays.unique_obs))
        v_by_obs = np.asarray(qv.v_many(arrays.unique_obs))
        return q_by_obs[arrays.obs_ids, arrays.actions], v_by_obs[arrays.obs_ids]
    q = np.zeros_like(arrays.rewards)
    v = np.zeros_like(arrays.rewards)
    for j in range(arrays.rewards.shape[0]):
        for t in range(int(arrays.lengths[j])):
            obs = arrays.unique_obs[arrays.obs_ids[j, t]]
            q[j, t] = qv.q(obs, int(arrays.actions[j, t]))
            v[j, t] = qv.v(obs)
    return q, v


def prepare_table(
    ds: BehaviorDataset,
    target: TargetPolicy,
    dc: DiscountConfig,
    clip: float | None = None,
    qv: "QVProvider | None" = None,
    horizon: int | None = None,
) -> PolicyTable:
    """Build the (n, T+1) estimator arrays for one behavior dataset."""
    arrays = ds.step_arrays()
    n, data_len = arrays.rewards.shape
    t_max = horizon if horizon is not None else (
        dc.horizon if dc.horizon is not None else data_len - 1
    )
    width = t_max + 1
    t_idx = np.arange(width)
    alive = t_idx[None, :] < arrays.lengths[:, None]
    alive_prev = np.hstack([np.ones((n, 1), dtype=bool), alive[:, :-1]])

    used = min(width, data_len)

    def padded(a: np.ndarray, fill: float) -> np.ndarray:
        out = np.full((n, width), fill)
        out[:, :used] = a[:, :used]
        return out

    alive_data = np.arange(data_len)[None, :] < arrays.lengths[:, None]
    tprob = _target_prob_matrix(target, arrays, alive_data, ds.policy_id)
    step_ratio = padded(
        np.where(alive_data, tprob / arrays.behavior_probs, 1.0), 1.0
    )

    rho = np.empty((n, width))
    prev = np.ones(n)
    for t in range(width):
        val = prev * step_ratio[:, t]
        if clip is not None:
            val = np.minimum(val, clip)
        rho[:, t] = np.where(alive[:, t], val, prev)
        prev = rho[:, t]
    rho_prev = np.hstack([np.ones((n, 1)), rho[:, :-1]])
    dr_w = rho_prev * np.where(alive, step_ratio, 1.0)

    gammas = dc.gamma ** t_idx
    rew = padded(arrays.rewards, 0.0) * alive * gammas
    if qv is None:
        qval = np.zeros((n, width))
        vval = np.zeros((n, width))
    else:
        q_raw, v_raw = _qv_matrices(qv, arrays)
        qval = padded(q_raw, 0.0) * alive * gammas
        vval = padded(v_raw, 0.0) * alive * gammas

    return PolicyTable(
        policy_id=ds.policy_id,
        n=n,
        horizon=t_max,
        gamma=dc.gamma,
        split_role=ds.split_role,
        rho=rho,
        rho_prev=rho_prev,
        dr_w=dr_w,
        alive=alive,
        alive_prev=alive_prev,
        rew=rew,
        qval=qval,
        vval=vval,
    )


def prepare_tables(
    md: MultiDataset,
    target: TargetPolicy,
    dc: DiscountConfig,
    clip: float | None = None,
    qv: "QVProvider | None" = None,
) -> list[PolicyTable]:
    """Tables for every behavior policy, aligned to one shared horizon."""
    t_max = dc.horizon if dc.horizon is not None else md.horizon_max
    return [prepare_table(ds, target, dc, clip, qv, horizon=t_max) for ds in md.datasets]


# ---------------------------------------------------------------------------
# Per-trajectory summands
# ---------------------------------------------------------------------------


def is_summands(table: PolicyTable) -> np.ndarray:
    """gamma^t rho_t r_t per trajectory and horizon."""
    return table.rho * table.rew


def dr_summands(table: PolicyTable) -> np.ndarray:
    """gamma^t (rho_{t-1} V(s_t) + rho_t (r_t - Q(s_t, a_t))) per step.

    Under clipping the reward term keeps the uncapped weight
    rho_prev * step_ratio while the V term uses the capped rho_prev.
    """
    return table.dr_w * (table.rew - table.qval) + table.rho_prev * table.vval


def control_summands(table: PolicyTable) -> np.ndarray:
    """The DR-minus-IS control-variate summand (mean zero on unclipped data)."""
    return dr_summands(table) - is_summands(table)


def dr_clipped_term(
    rho_prev: float,
    step_ratio: float,
    reward: float,
    q_value: float,
    v_value: float,
    gamma: float,
    t: int,
) -> float:
    """Single-step DR summand with the clipped-ratio convention.

    rho_prev is the (already capped) cumulative ratio through t-1; the reward
    factor uses rho_prev * step_ratio without re-capping, the baseline factor
    uses rho_prev itself.  Equals the plain DR summand whenever no cap was hit
    before t.
    """
    return gamma**t * (rho_prev * step_ratio * (reward - q_value) + rho_prev * v_value)


# ---------------------------------------------------------------------------
# Weight schemes
# ---------------------------------------------------------------------------


class WeightKind(str, Enum):
    RAW = "raw"  # rho / N
    GLOBAL = "global"  # normalized across every trajectory of every policy
    PER_POLICY = "per_policy"  # normalized within each behavior policy


@dataclass(frozen=True)
class WeightScheme:
    """Per-horizon weight denominators for a pool of policy tables.

    ``denominators[t]`` (global/raw) or ``denominators[i, t]`` (per-policy)
    is the sum the raw ratios are divided by at horizon t; ``prev`` holds the
    analogous sums over rho_{t-1}.
    """

    kind: WeightKind
    denominators: np.ndarray
    prev: np.ndarray


def weight_scheme(tables: Sequence[PolicyTable], kind: WeightKind) -> WeightScheme:
    total_n = sum(t.n for t in tables)
    if kind is WeightKind.RAW:
        width = tables[0].rho.shape[1]
        den = np.full(width, float(total_n))
        return WeightScheme(kind, den, den)
    per = np.stack([t.rho.sum(axis=0) for t in tables])
    per_prev = np.stack([t.rho_prev.sum(axis=0) for t in tables])
    if kind is WeightKind.PER_POLICY:
        return WeightScheme(kind, per, per_prev)
    return WeightScheme(kind, per.sum(axis=0), per_prev.sum(axis=0))


# ---------------------------------------------------------------------------
# Vanilla estimators
# ---------------------------------------------------------------------------


def _ratio_columns(num: np.ndarray, den: np.ndarray, label: str) -> np.ndarray:
    """Columnwise num/den with zero-over-zero treated as an empty horizon."""
    if np.any((den <= 0) & (num != 0)):
        t = int(np.argwhere((den <= 0) & (num != 0))[0])
        raise DegenerateWeightsError(f"{label}: zero weight denominator at t={t}")
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def is_value(tables: Sequence[PolicyTable]) -> float:
    total_n = sum(t.n for t in tables)
    return float(sum(is_summands(t).sum() for t in tables) / total_n)


def dr_value(tables: Sequence[PolicyTable]) -> float:
    total_n = sum(t.n for t in tables)
    return float(sum(dr_summands(t).sum() for t in tables) / total_n)


def wis_value(tables: Sequence[PolicyTable]) -> float:
    num = sum((t.rew * t.rho).sum(axis=0) for t in tables)
    den = weight_scheme(tables, WeightKind.GLOBAL).denominators
    return float(_ratio_columns(num, den, "wis").sum())


def wdr_value(tables: Sequence[PolicyTable]) -> float:
    scheme = weight_scheme(tables, WeightKind.GLOBAL)
    num_r = sum(((t.rew - t.qval) * t.rho).sum(axis=0) for t in tables)
    num_v = sum((t.vval * t.rho_prev).sum(axis=0) for t in tables)
    reward_part = _ratio_columns(num_r, scheme.denominators, "wdr")
    baseline_part = _ratio_columns(num_v, scheme.prev, "wdr")
    return float((reward_part + baseline_part).sum())


def swis_value(tables: Sequence[PolicyTable]) -> float:
    total_n = sum(t.n for t in tables)
    value = 0.0
    for table in tables:
        per_t = (table.u_weights() * table.rew).sum(axis=0)
        value += table.n / total_n * per_t.sum()
    return float(value)


def swdr_value(tables: Sequence[PolicyTable]) -> float:
    total_n = sum(t.n for t in tables)
    value = 0.0
    for table in tables:
        u = table.u_weights()
        u_prev = table.u_prev_weights()
        per_t = (u * (table.rew - table.qval) + u_prev * table.vval).sum(axis=0)
        value += table.n / total_n * per_t.sum()
    return float(value)


def estimate_is(
    md: MultiDataset, target: TargetPolicy, dc: DiscountConfig, clip: float | None = None
) -> float:
    """(1/sum n_i) * sum_{i,j,t} gamma^t rho_{i,j,t} r_{i,j,t}."""
    return is_value(prepare_tables(md, target, dc, clip))


def estimate_wis(
    md: MultiDataset, target: TargetPolicy, dc: DiscountConfig, clip: float | None = None
) -> float:
    """IS with weights self-normalized across all policies' trajectories."""
    return wis_value(prepare_tables(md, target, dc, clip))


def estimate_swis(
    md: MultiDataset, target: TargetPolicy, dc: DiscountConfig, clip: float | None = None
) -> float:
    """IS with weights self-normalized inside each behavior policy."""
    return swis_value(prepare_tables(md, target, dc, clip))


def estimate_dr(
    md: MultiDataset,
    target: TargetPolicy,
    dc: DiscountConfig,
    qv: "QVProvider",
    clip: float | None = None,
) -> float:
    """Doubly robust: IS plus model-based control variates from qv."""
    return dr_value(prepare_tables(md, target, dc, clip, qv))


def estimate_wdr(
    md: MultiDataset,
    target: TargetPolicy,
    dc: DiscountConfig,
    qv: "QVProvider",
    clip: float | None = None,
) -> float:
    return wdr_value(prepare_tables(md, target, dc, clip, qv))


def estimate_swdr(
    md: MultiDataset,
    target: TargetPolicy,
    dc: DiscountConfig,
    qv: "QVProvider",
    clip: float | None = None,
) -> float:
    return swdr_value(prepare_tables(md, target, dc, clip, qv))


# ---------------------------------------------------------------------------
# Per-policy components
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DeltaInputs:
    """Per-sample ratio ingredients of the self-normalized components.

    The per-horizon component is num/den (+ num_prev/den_prev for the DR
    baseline term); den entries are rho_t gated by the alive mask so a
    finished trajectory drops out of the denominators.
    """

    num: np.ndarray  # gamma^t rho_t r_t (SWIS) or gamma^t rho_t (r_t - Q) (SWDR)
    den: np.ndarray  # rho_t * alive
    num_prev: np.ndarray | None  # gamma^t rho_{t-1} V(s_t)
    den_prev: np.ndarray | None  # rho_{t-1} * alive_prev
    num_q: np.ndarray | None  # gamma^t rho_t Q(s_t, a_t), for the control split


@dataclass(frozen=True)
class ComponentEstimate:
    """Per-horizon value components V_{i,t} (and controls W_{i,t}) for one
    behavior policy, with the per-trajectory contributions the variance
    estimators need."""

    family: Family
    policy_id: str
    n: int
    horizon: int
    per_t: np.ndarray
    control_per_t: np.ndarray | None
    per_sample: np.ndarray
    control_per_sample: np.ndarray | None
    delta: DeltaInputs | None
    constant_mask: np.ndarray
    control_constant_mask: np.ndarray | None
    table: PolicyTable

    @property
    def value(self) -> float:
        return float(self.per_t.sum())


def _column_constant(a: np.ndarray) -> np.ndarray:
    if a.shape[0] <= 1:
        return np.ones(a.shape[1], dtype=bool)
    return np.ptp(a, axis=0) == 0.0


def components(table: PolicyTable, family: Family | str) -> ComponentEstimate:
    """Per-horizon components of one estimator family for one policy."""
    family = Family(family)
    alive_counts = table.alive.sum(axis=0)
    if family in (Family.IS, Family.DR):
        samples = is_summands(table) if family is Family.IS else dr_summands(table)
        per_t = samples.mean(axis=0)
        control_samples = control_per_t = control_mask = None
        if family is Family.DR:
            control_samples = control_summands(table)
            control_per_t = control_samples.mean(axis=0)
            control_mask = _column_constant(control_samples)
        return ComponentEstimate(
            family=family,
            policy_id=table.policy_id,
            n=table.n,
            horizon=table.horizon,
            per_t=per_t,
            control_per_t=control_per_t,
            per_sample=samples,
            control_per_sample=control_samples,
            delta=None,
            constant_mask=_column_constant(samples),
            control_constant_mask=control_mask,
            table=table,
        )

    u = table.u_weights()
    if family is Family.SWIS:
        delta = DeltaInputs(
            num=table.rho * table.rew,
            den=table.rho,
            num_prev=None,
            den_prev=None,
            num_q=None,
        )
        per_t = (u * table.rew).sum(axis=0)
        control_per_t = control_mask = None
    else:  # SWDR
        delta = DeltaInputs(
            num=table.rho * (table.rew - table.qval),
            den=table.rho,
            num_prev=table.rho_prev * table.vval,
            den_prev=table.rho_prev,
            num_q=table.rho * table.qval,
        )
        u_prev = table.u_prev_weights()
        per_t = (u * (table.rew - table.qval) + u_prev * table.vval).sum(axis=0)
        control_per_t = (u_prev * table.vval - u * table.qval).sum(axis=0)
        control_mask = alive_counts == 0
    return ComponentEstimate(
        family=family,
        policy_id=table.policy_id,
        n=table.n,
        horizon=table.horizon,
        per_t=per_t,
        control_per_t=control_per_t,
        per_sample=delta.num,
        control_per_sample=None,
        delta=delta,
        constant_mask=alive_counts == 0,
        control_constant_mask=control_mask,
        table=table,
    )


def components_is(
    ds_i: BehaviorDataset, target: TargetPolicy, dc: DiscountConfig, clip: float | None = None
) -> ComponentEstimate:
    return components(prepare_table(ds_i, target, dc, clip), Family.IS)


def components_swis(
    ds_i: BehaviorDataset, target: TargetPolicy, dc: DiscountConfig, clip: float | None = None
) -> ComponentEstimate:
    return components(prepare_table(ds_i, target, dc, clip), Family.SWIS)


def components_dr(
    ds_i: BehaviorDataset,
    target: TargetPolicy,
    dc: DiscountConfig,
    qv: "QVProvider",
    clip: float | None = None,
) -> ComponentEstimate:
    return components(prepare_table(ds_i, target, dc, clip, qv), Family.DR)


def components_swdr(
    ds_i: BehaviorDataset,
    target: TargetPolicy,
    dc: DiscountConfig,
    qv: "QVProvider",
    clip: float | None = None,
) -> ComponentEstimate:
    return components(prepare_table(ds_i, target, dc, clip, qv), Family.SWDR)
