"""Variance-optimal mixing of per-policy (and per-horizon) components.

Three weight rules, in increasing structure:

  * naive: one weight per behavior policy, inverse-variance
    (alpha_i proportional to 1 / Var_i, summing to 1);
  * horizon: one weight per policy per horizon,
    alpha_i = Sigma_i^{-1} (sum_k Sigma_k^{-1})^{-1} e;
  * alpha/beta: per-horizon weights plus free control-variate coefficients,
    alpha_i = H_{i,11} (sum_k H_{k,11})^{-1} e and
    beta_i = H_{i,21} (sum_k H_{k,11})^{-1} e from the blocks of each
    policy's joint precision matrix.

Weights are always estimated on one half of the data and applied to
component values from the other half, so weight noise stays independent of
value noise.  Horizons past ``t_mix`` are not mixed: their components are
added with the vanilla n_i-proportional weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import linalg, variance
from .core import MultiDataset, TargetPolicy, ValidationError, split_multidataset
from .estimators import (
    ComponentEstimate,
    DiscountConfig,
    Family,
    PolicyTable,
    components,
    prepare_table,
)


@dataclass(frozen=True)
class MixtureWeights:
    """Mixing weights: alpha is (M, T+1) with columns summing to 1 (a single
    column for the naive rule); beta is unconstrained and present only for
    the control-variate rule."""

    alpha: np.ndarray
    beta: np.ndarray | None
    t_mix: int
    method: str  # "naive" | "horizon" | "alphabeta"
    condition_numbers: tuple[float, ...] = ()
    predicted_variance: float | None = None

    @property
    def has_negative(self) -> bool:
        return bool((self.alpha < 0).any())


@dataclass(frozen=True)
class MixtureEstimate:
    value: float
    weights: MixtureWeights
    condition_numbers: tuple[float, ...]
    residual_value: float
    family: Family
    split_seed: int

    def to_json_dict(self) -> dict:
        return {
            "value": self.value,
            "family": self.family.value,
            "method": self.weights.method,
            "t_mix": self.weights.t_mix,
            "alpha": [[float(x) for x in row] for row in self.weights.alpha],
            "beta": None
            if self.weights.beta is None
            else [[float(x) for x in row] for row in self.weights.beta],
            "condition_numbers": list(self.condition_numbers),
            "residual_value": self.residual_value,
            "split_seed": self.split_seed,
            "has_negative_weights": self.weights.has_negative,
        }


def naive_weights(variances: Sequence[float]) -> MixtureWeights:
    """Inverse-variance weights; minimal achievable variance attached."""
    v = np.asarray(variances, dtype=float)
    if v.ndim != 1 or len(v) < 1:
        raise ValueError("need a flat, nonempty list of variances")
    if not (v > 0).all():
        raise ValueError(f"variances must be positive, got {v.tolist()}")
    inv = 1.0 / v
    alpha = (inv / inv.sum())[:, None]
    return MixtureWeights(
        alpha=alpha,
        beta=None,
        t_mix=0,
        method="naive",
        predicted_variance=float(1.0 / inv.sum()),
    )


def _common_coords(covs: Sequence[variance.CovarianceEstimate]) -> list[int]:
    kept = set(covs[0].kept)
    for c in covs[1:]:
        kept &= set(c.kept)
    return sorted(kept)


def horizon_weights(
    covs: Sequence[variance.CovarianceEstimate], eps: float = 1e-8
) -> MixtureWeights:
    """Per-horizon inverse-covariance weights from per-policy matrices.

    Coordinates any policy dropped as constant are left at the fallback
    weight 1/M (any weights summing to 1 are optimal for a deterministic
    coordinate).  Condition numbers of each regularized matrix and of the
    summed inverse are recorded in order.
    """
    t_mix = covs[0].t_mix
    if any(c.t_mix != t_mix for c in covs):
        raise ValueError("covariance estimates disagree on t_mix")
    m = len(covs)
    width = t_mix + 1
    alpha = np.full((m, width), 1.0 / m)
    common = _common_coords(covs)
    conds: list[float] = []
    if common:
        inverses = []
        for c in covs:
            pos = [c.kept.index(t) for t in common]
            sub = linalg.regularize(c.sigma[np.ix_(pos, pos)], eps)
            conds.append(linalg.condition_number(sub))
            inverses.append(linalg.spd_inverse(sub))
        summed = linalg.symmetrize(sum(inverses))
        conds.append(linalg.condition_number(summed))
        bridge = linalg.spd_solve(summed, np.ones(len(common)))
        for i, inv in enumerate(inverses):
            alpha[i, common] = inv @ bridge
    return MixtureWeights(
        alpha=alpha, beta=None, t_mix=t_mix, method="horizon",
        condition_numbers=tuple(conds),
    )


def alphabeta_weights(
    joints: Sequence[variance.CovarianceEstimate], eps: float = 1e-8
) -> MixtureWeights:
    """Weights from the precision blocks of per-policy joint (value, control)
    covariance matrices; beta entries for dropped control coordinates are 0."""
    t_mix = joints[0].t_mix
    if any(c.t_mix != t_mix for c in joints):
        raise ValueError("covariance estimates disagree on t_mix")
    if any(c.kept_controls is None for c in joints):
        raise ValueError("alphabeta weights need joint matrices (with_controls=True)")
    m = len(joints)
    width = t_mix + 1
    alpha = np.full((m, width), 1.0 / m)
    beta = np.zeros((m, width))
    common = _common_coords(joints)
    conds: list[float] = []
    if common:
        h11s, h21s = [], []
        for c in joints:
            vpos = [c.kept.index(t) for t in common]
            wpos = [len(c.kept) + k for k in range(len(c.kept_controls))]
            sub = linalg.regularize(c.sigma[np.ix_(vpos + wpos, vpos + wpos)], eps)
            conds.append(linalg.condition_number(sub))
            inv = linalg.spd_inverse(sub)
            kv = len(common)
            h11s.append(inv[:kv, :kv])
            h21s.append(inv[kv:, :kv])
        summed = linalg.symmetrize(sum(h11s))
        conds.append(linalg.condition_number(summed))
        bridge = linalg.spd_solve(summed, np.ones(len(common)))
        for i, c in enumerate(joints):
            alpha[i, common] = h11s[i] @ bridge
            beta[i, list(c.kept_controls)] = h21s[i] @ bridge
    return MixtureWeights(
        alpha=alpha, beta=beta, t_mix=t_mix, method="alphabeta",
        condition_numbers=tuple(conds),
    )


# ---------------------------------------------------------------------------
# Half-split mixture estimators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitComponents:
    """Per-policy components on the two halves of a seeded split."""

    var_comps: list[ComponentEstimate]
    val_comps: list[ComponentEstimate]
    split_seed: int
    family: Family


def split_components(
    md: MultiDataset,
    family: Family | str,
    target: TargetPolicy,
    dc: DiscountConfig,
    split_seed: int,
    clip: float | None = None,
    qv=None,
) -> SplitComponents:
    family = Family(family)
    for ds in md.datasets:
        if ds.n < 4:
            raise ValidationError(
                f"policy {ds.policy_id!r}: mixture estimation needs n >= 4, got {ds.n}"
            )
    var_md, val_md = split_multidataset(md, split_seed)
    horizon = dc.horizon if dc.horizon is not None else md.horizon_max
    var_tables = [
        prepare_table(ds, target, dc, clip, qv, horizon=horizon) for ds in var_md.datasets
    ]
    val_tables = [
        prepare_table(ds, target, dc, clip, qv, horizon=horizon) for ds in val_md.datasets
    ]
    return components_from_tables(var_tables, val_tables, family, split_seed)


def components_from_tables(
    var_tables: Sequence[PolicyTable],
    val_tables: Sequence[PolicyTable],
    family: Family | str,
    split_seed: int,
) -> SplitComponents:
    family = Family(family)
    return SplitComponents(
        var_comps=[components(t, family) for t in var_tables],
        val_comps=[components(t, family) for t in val_tables],
        split_seed=split_seed,
        family=family,
    )


def _vanilla_residual(val_comps: Sequence[ComponentEstimate], t_mix: int) -> float:
    """Unmixed tail: horizons past t_mix weighted by n_i / sum(n_i)."""
    total_n = sum(c.n for c in val_comps)
    return float(
        sum(c.n / total_n * c.per_t[t_mix + 1 :].sum() for c in val_comps)
    )


def mix_naive_split(sc: SplitComponents) -> MixtureEstimate:
    variances = []
    for comp in sc.var_comps:
        if sc.family in (Family.IS, Family.DR):
            variances.append(variance.sample_var(comp.per_sample.sum(axis=1)))
        elif sc.family is Family.SWIS:
            variances.append(variance.delta_var_swis(comp.delta))
        else:
            variances.append(variance.delta_var_swdr(comp.delta))
    weights = naive_weights(variances)
    value = float(
        sum(w * comp.value for w, comp in zip(weights.alpha[:, 0], sc.val_comps))
    )
    return MixtureEstimate(
        value=value,
        weights=weights,
        condition_numbers=(),
        residual_value=0.0,
        family=sc.family,
        split_seed=sc.split_seed,
    )


def mix_horizon_split(sc: SplitComponents, t_mix: int, eps: float = 1e-8) -> MixtureEstimate:
    covs = [variance.assemble_cov(c, t_mix) for c in sc.var_comps]
    weights = horizon_weights(covs, eps)
    mixed = float(
        sum(
            (weights.alpha[i] * comp.per_t[: t_mix + 1]).sum()
            for i, comp in enumerate(sc.val_comps)
        )
    )
    residual = _vanilla_residual(sc.val_comps, t_mix)
    return MixtureEstimate(
        value=mixed + residual,
        weights=weights,
        condition_numbers=weights.condition_numbers,
        residual_value=residual,
        family=sc.family,
        split_seed=sc.split_seed,
    )


def mix_alphabeta_split(
    sc: SplitComponents, t_mix: int, eps: float = 1e-8, force_beta_zero: bool = False
) -> MixtureEstimate:
    if not sc.family.uses_controls:
        raise ValueError("alpha/beta mixing applies to the control-variate families only")
    joints = [variance.assemble_cov(c, t_mix, with_controls=True) for c in sc.var_comps]
    if force_beta_zero:
        # with the controls pinned at zero the optimum is the horizon rule on
        # the value blocks alone
        v_blocks = [
            variance.CovarianceEstimate(
                sigma=j.sigma[: len(j.kept), : len(j.kept)],
                n=j.n,
                t_mix=j.t_mix,
                kept=j.kept,
                kept_controls=None,
                policy_id=j.policy_id,
                family=j.family,
            )
            for j in joints
        ]
        base = horizon_weights(v_blocks, eps)
        weights = MixtureWeights(
            alpha=base.alpha,
            beta=np.zeros_like(base.alpha),
            t_mix=t_mix,
            method="alphabeta",
            condition_numbers=base.condition_numbers,
        )
    else:
        weights = alphabeta_weights(joints, eps)
    mixed = 0.0
    for i, comp in enumerate(sc.val_comps):
        value_part = (comp.per_t - comp.control_per_t)[: t_mix + 1]
        control_part = comp.control_per_t[: t_mix + 1]
        mixed += float(
            (weights.alpha[i] * value_part).sum() + (weights.beta[i] * control_part).sum()
        )
    residual = _vanilla_residual(sc.val_comps, t_mix)
    return MixtureEstimate(
        value=mixed + residual,
        weights=weights,
        condition_numbers=weights.condition_numbers,
        residual_value=residual,
        family=sc.family,
        split_seed=sc.split_seed,
    )


def mix_naive(
    md: MultiDataset,
    family: Family | str,
    target: TargetPolicy,
    dc: DiscountConfig,
    split_seed: int,
    clip: float | None = None,
    qv=None,
) -> MixtureEstimate:
    """Naive mixture: inverse-variance weights across whole per-policy
    estimators (variances from one half, values from the other)."""
    return mix_naive_split(split_components(md, family, target, dc, split_seed, clip, qv))


def mix_horizon(
    md: MultiDataset,
    family: Family | str,
    target: TargetPolicy,
    dc: DiscountConfig,
    t_mix: int,
    split_seed: int,
    clip: float | None = None,
    qv=None,
    eps: float = 1e-8,
) -> MixtureEstimate:
    """Per-horizon mixture for horizons 0..t_mix, vanilla-weighted tail."""
    sc = split_components(md, family, target, dc, split_seed, clip, qv)
    return mix_horizon_split(sc, t_mix, eps)


def mix_alphabeta(
    md: MultiDataset,
    family: Family | str,
    target: TargetPolicy,
    dc: DiscountConfig,
    t_mix: int,
    split_seed: int,
    clip: float | None = None,
    qv=None,
    eps: float = 1e-8,
    force_beta_zero: bool = False,
) -> MixtureEstimate:
    """Control-variate mixture: separate weights for the value components and
    the mean-zero control components of the DR families."""
    sc = split_components(md, family, target, dc, split_seed, clip, qv)
    return mix_alphabeta_split(sc, t_mix, eps, force_beta_zero)
