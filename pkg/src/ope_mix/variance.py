"""Variance and covariance estimators for the per-policy components.

IS and DR components are plain averages, so their moments are direct
population moments of the per-trajectory summands (divided by n to give the
variance of the average).  The self-normalized components are ratios of
averages; their moments come from first-order Taylor (Delta-Method)
expansions, which reduce to second moments of per-trajectory residual rows:

    ratio residual_j[t] = (num_j[t] - ratio[t] * den_j[t]) / sum_k den_k[t]

Sums of products of those rows estimate Var/Cov of the component estimators
directly (no further division by n).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg
from .estimators import ComponentEstimate, DeltaInputs, DegenerateWeightsError, Family


class DegenerateComponentsError(ValueError):
    """Every mixing coordinate is constant; no covariance can be formed."""


class SplitReuseError(ValueError):
    """Variance estimation was attempted on the value half of a split."""


@dataclass(frozen=True)
class DeltaPlugins:
    """Self-normalized plug-in means entering the Delta-Method residuals.

    theta[t] is the weighted mean of gamma^t r; nu and psi split it into the
    reward-minus-Q and Q parts (theta = nu + psi); omega and phi are the
    weighted means of gamma^t V under the shifted weights (phi is omega's
    alias used by the control-variate covariances).
    """

    theta: np.ndarray
    nu: np.ndarray | None
    omega: np.ndarray | None
    phi: np.ndarray | None
    psi: np.ndarray | None


def _column_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num_sum, den_sum = num.sum(axis=0), den.sum(axis=0)
    bad = (den_sum <= 0) & (num_sum != 0)
    if bad.any():
        raise DegenerateWeightsError(
            f"zero weight denominator at t={int(np.argwhere(bad)[0])}"
        )
    return np.divide(num_sum, den_sum, out=np.zeros_like(num_sum), where=den_sum > 0)


def _ratio_residuals(num: np.ndarray, den: np.ndarray, ratio: np.ndarray) -> np.ndarray:
    den_sum = den.sum(axis=0)
    raw = num - ratio[None, :] * den
    return np.divide(raw, den_sum[None, :], out=np.zeros_like(raw), where=den_sum > 0)


def compute_plugins(delta: DeltaInputs) -> DeltaPlugins:
    if delta.num_q is None:  # SWIS
        return DeltaPlugins(
            theta=_column_ratio(delta.num, delta.den),
            nu=None, omega=None, phi=None, psi=None,
        )
    nu = _column_ratio(delta.num, delta.den)
    psi = _column_ratio(delta.num_q, delta.den)
    omega = _column_ratio(delta.num_prev, delta.den_prev)
    return DeltaPlugins(theta=nu + psi, nu=nu, omega=omega, phi=omega, psi=psi)


def swis_residuals(delta: DeltaInputs, plugins: DeltaPlugins | None = None) -> np.ndarray:
    """Residual rows of the self-normalized IS components: u (gamma^t r - theta)."""
    num = delta.num if delta.num_q is None else delta.num + delta.num_q
    plugins = plugins or compute_plugins(delta)
    return _ratio_residuals(num, delta.den, plugins.theta)


def swdr_residuals(delta: DeltaInputs, plugins: DeltaPlugins | None = None) -> np.ndarray:
    """Residual rows of the full self-normalized DR components."""
    plugins = plugins or compute_plugins(delta)
    return _ratio_residuals(delta.num, delta.den, plugins.nu) + _ratio_residuals(
        delta.num_prev, delta.den_prev, plugins.omega
    )


def control_residuals(delta: DeltaInputs, plugins: DeltaPlugins | None = None) -> np.ndarray:
    """Residual rows of the control components:
    u_prev (gamma^t V - phi) - u (gamma^t Q - psi)."""
    plugins = plugins or compute_plugins(delta)
    return _ratio_residuals(delta.num_prev, delta.den_prev, plugins.phi) - _ratio_residuals(
        delta.num_q, delta.den, plugins.psi
    )


# ---------------------------------------------------------------------------
# Scalar estimators
# ---------------------------------------------------------------------------


def sample_var(totals: np.ndarray) -> float:
    """Var of an averaging estimator from its per-trajectory totals:
    population moments of the totals divided by n."""
    totals = np.asarray(totals, dtype=float)
    n = totals.shape[0]
    if n < 2:
        raise ValueError("sample_var needs at least 2 trajectories")
    return float((np.mean(totals**2) - np.mean(totals) ** 2) / n)


def sample_cov(per_sample: np.ndarray, t1: int, t2: int) -> float:
    """Cov of two per-horizon averaging components (product moments / n)."""
    a, b = per_sample[:, t1], per_sample[:, t2]
    n = a.shape[0]
    if n < 2:
        raise ValueError("sample_cov needs at least 2 trajectories")
    return float((np.mean(a * b) - a.mean() * b.mean()) / n)


def delta_var_swis(delta: DeltaInputs, plugins: DeltaPlugins | None = None) -> float:
    """Delta-Method variance of a whole self-normalized IS component:
    sum_j (sum_t residual_j[t])^2.  Already estimates Var of the component
    (its n-fold multiple is the strongly consistent object)."""
    return float((swis_residuals(delta, plugins).sum(axis=1) ** 2).sum())


def delta_var_swdr(delta: DeltaInputs, plugins: DeltaPlugins | None = None) -> float:
    return float((swdr_residuals(delta, plugins).sum(axis=1) ** 2).sum())


def delta_cov_swis(
    delta: DeltaInputs, t1: int, t2: int, plugins: DeltaPlugins | None = None
) -> float:
    res = swis_residuals(delta, plugins)
    return float((res[:, t1] * res[:, t2]).sum())


def delta_cov_swdr(
    delta: DeltaInputs, t1: int, t2: int, plugins: DeltaPlugins | None = None
) -> float:
    res = swdr_residuals(delta, plugins)
    return float((res[:, t1] * res[:, t2]).sum())


def delta_cov_swis_w(
    delta: DeltaInputs, t1: int, t2: int, plugins: DeltaPlugins | None = None
) -> float:
    plugins = plugins or compute_plugins(delta)
    res_v = swis_residuals(delta, plugins)
    res_w = control_residuals(delta, plugins)
    return float((res_v[:, t1] * res_w[:, t2]).sum())


def delta_cov_w_w(
    delta: DeltaInputs, t1: int, t2: int, plugins: DeltaPlugins | None = None
) -> float:
    res = control_residuals(delta, plugins)
    return float((res[:, t1] * res[:, t2]).sum())


def delta_method_variance(gradient: np.ndarray, sigma: np.ndarray, n: int) -> float:
    """First-order Taylor variance: (1/n) grad' Sigma grad."""
    gradient = np.asarray(gradient, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (gradient.shape[0], gradient.shape[0]):
        raise ValueError(
            f"dimension mismatch: gradient {gradient.shape}, sigma {sigma.shape}"
        )
    if n < 1:
        raise ValueError("n must be >= 1")
    return float(gradient @ sigma @ gradient) / n


# ---------------------------------------------------------------------------
# Covariance assembly
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CovarianceEstimate:
    """Estimated covariance of the per-horizon component estimators.

    ``sigma`` covers only the kept (non-constant) coordinates, ordered value
    coordinates first and control coordinates second for joint matrices.
    Entries estimate Var/Cov of the component estimators themselves (already
    divided by the sample count: scaled=True).
    """

    sigma: np.ndarray
    n: int
    t_mix: int
    kept: tuple[int, ...]
    kept_controls: tuple[int, ...] | None
    policy_id: str
    family: Family
    scaled: bool = True

    @property
    def dim(self) -> int:
        return self.sigma.shape[0]

    def to_json_dict(self) -> dict:
        return {
            "policy_id": self.policy_id,
            "family": self.family.value,
            "n": self.n,
            "t_mix": self.t_mix,
            "kept": list(self.kept),
            "kept_controls": None if self.kept_controls is None else list(self.kept_controls),
            "scaled": self.scaled,
            "sigma": [[float(x) for x in row] for row in self.sigma],
        }


def _moment_cov(matrix: np.ndarray) -> np.ndarray:
    n = matrix.shape[0]
    centered = matrix - matrix.mean(axis=0)
    return (centered.T @ centered) / (n * n)


def _keep_mask(matrix: np.ndarray, structural: np.ndarray, width: int) -> np.ndarray:
    varying = np.ptp(matrix, axis=0) != 0.0 if matrix.shape[0] > 1 else np.zeros(width, bool)
    return varying & ~structural[:width]


def assemble_cov(
    comp: ComponentEstimate,
    t_mix: int,
    with_controls: bool = False,
    allow_reuse: bool = False,
) -> CovarianceEstimate:
    """Covariance matrix of one policy's components for horizons 0..t_mix.

    Constant coordinates (flagged by the component extraction or detected as
    zero-variation columns) are dropped; ``kept``/``kept_controls`` record
    the surviving horizon indices.  Refuses to run on the value half of a
    split unless ``allow_reuse`` is set.
    """
    if comp.table.split_role == "value" and not allow_reuse:
        raise SplitReuseError(
            "covariance assembly on the value half would couple weights and "
            "values; pass allow_reuse=True to override"
        )
    if t_mix < 0 or t_mix > comp.horizon:
        raise ValueError(f"t_mix must be in [0, {comp.horizon}], got {t_mix}")
    width = t_mix + 1
    if with_controls and not comp.family.uses_controls:
        raise ValueError(f"family {comp.family.value} has no control components")

    if comp.family in (Family.IS, Family.DR):
        if with_controls:
            value_part = (comp.per_sample - comp.control_per_sample)[:, :width]
            control_part = comp.control_per_sample[:, :width]
        else:
            value_part = comp.per_sample[:, :width]
            control_part = None
        scale = "moment"
    else:
        plugins = compute_plugins(comp.delta)
        if with_controls:
            value_part = swis_residuals(comp.delta, plugins)[:, :width]
            control_part = control_residuals(comp.delta, plugins)[:, :width]
        else:
            value_part = (
                swis_residuals(comp.delta, plugins)
                if comp.family is Family.SWIS
                else swdr_residuals(comp.delta, plugins)
            )[:, :width]
            control_part = None
        scale = "residual"

    keep_v = _keep_mask(value_part, comp.constant_mask, width)
    kept = tuple(int(t) for t in np.flatnonzero(keep_v))
    columns = [value_part[:, keep_v]]
    kept_w: tuple[int, ...] | None = None
    if control_part is not None:
        structural_w = (
            comp.control_constant_mask
            if comp.control_constant_mask is not None
            else np.zeros(width, dtype=bool)
        )
        keep_w = _keep_mask(control_part, structural_w, width)
        kept_w = tuple(int(t) for t in np.flatnonzero(keep_w))
        columns.append(control_part[:, keep_w])
    stacked = np.hstack(columns)
    if stacked.shape[1] == 0:
        raise DegenerateComponentsError(
            f"policy {comp.policy_id!r}: all coordinates constant up to t={t_mix}"
        )

    if scale == "moment":
        sigma = _moment_cov(stacked)
    else:
        sigma = stacked.T @ stacked
    return CovarianceEstimate(
        sigma=linalg.symmetrize(sigma),
        n=comp.n,
        t_mix=t_mix,
        kept=kept,
        kept_controls=kept_w,
        policy_id=comp.policy_id,
        family=comp.family,
    )
