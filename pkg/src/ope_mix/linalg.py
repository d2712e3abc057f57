"""Small dense symmetric linear algebra used by the mixture-weight solvers.

All matrices here are tiny (a few dozen rows at most), so everything is
implemented directly on numpy arrays: Cholesky factorization with explicit
pivot diagnostics, SPD solves and inverses through the factor, scaled-identity
ridge regularization, and condition numbers via power / inverse-power
iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SYMMETRY_RTOL = 1e-8


class NotSPDError(ValueError):
    """Raised when a matrix expected to be SPD has a non-positive pivot."""

    def __init__(self, pivot: int, value: float):
        self.pivot = pivot
        self.value = value
        super().__init__(
            f"matrix is not positive definite: pivot {pivot} has value {value:.6g}"
        )


def symmetrize(a: np.ndarray) -> np.ndarray:
    """Average a matrix with its transpose, killing floating-point drift."""
    a = np.asarray(a, dtype=float)
    return 0.5 * (a + a.T)


def _check_symmetric(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    scale = max(np.abs(a).max(), 1.0)
    if np.abs(a - a.T).max() > SYMMETRY_RTOL * scale:
        raise ValueError("matrix is not symmetric")
    return a


def cholesky(a: np.ndarray) -> np.ndarray:
    """Lower-triangular L with L @ L.T == a for symmetric positive definite a.

    Raises NotSPDError carrying the index of the first non-positive pivot.
    """
    a = _check_symmetric(a)
    n = a.shape[0]
    low = np.zeros((n, n))
    for j in range(n):
        d = a[j, j] - low[j, :j] @ low[j, :j]
        if not (d > 0.0) or not math.isfinite(d):
            raise NotSPDError(pivot=j, value=float(d))
        low[j, j] = math.sqrt(d)
        if j + 1 < n:
            low[j + 1 :, j] = (a[j + 1 :, j] - low[j + 1 :, :j] @ low[j, :j]) / low[j, j]
    return low


def _forward_sub(low: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = low.shape[0]
    x = np.array(b, dtype=float, copy=True)
    for i in range(n):
        if i:
            x[i] -= low[i, :i] @ x[:i]
        x[i] /= low[i, i]
    return x


def _backward_sub(low: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Solves low.T @ x = b.
    n = low.shape[0]
    x = np.array(b, dtype=float, copy=True)
    for i in range(n - 1, -1, -1):
        if i + 1 < n:
            x[i] -= low[i + 1 :, i] @ x[i + 1 :]
        x[i] /= low[i, i]
    return x


def spd_solve(a: np.ndarray, b: np.ndarray, factor: np.ndarray | None = None) -> np.ndarray:
    """Solve a @ x = b for SPD a; b may be a vector or a matrix of columns."""
    low = cholesky(a) if factor is None else factor
    b = np.asarray(b, dtype=float)
    return _backward_sub(low, _forward_sub(low, b))


def spd_inverse(a: np.ndarray) -> np.ndarray:
    """Inverse of an SPD matrix, symmetrized to cancel round-off."""
    n = np.asarray(a).shape[0]
    return symmetrize(spd_solve(a, np.eye(n)))


def regularize(a: np.ndarray, eps: float) -> np.ndarray:
    """Add a scaled-identity ridge: a + eps * mean(diag(a)) * I."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    a = np.asarray(a, dtype=float)
    if eps == 0.0:
        return a
    return a + eps * float(np.mean(np.diag(a))) * np.eye(a.shape[0])


def _start_vector(n: int) -> np.ndarray:
    # Deterministic start with all spectral components generically present.
    v = 1.0 + 0.01 * np.sin(np.arange(1, n + 1, dtype=float))
    return v / np.linalg.norm(v)


def _power_iteration(matvec, n: int, rtol: float = 1e-8, max_iter: int = 100_000) -> float:
    v = _start_vector(n)
    lam = 0.0
    for _ in range(max_iter):
        w = matvec(v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        new_lam = float(v @ matvec(v))
        if abs(new_lam - lam) <= rtol * max(abs(new_lam), 1e-300):
            return new_lam
        lam = new_lam
    return lam


def condition_number(a: np.ndarray) -> float:
    """lambda_max / lambda_min of a symmetric matrix; inf when not SPD."""
    a = _check_symmetric(a)
    if a.shape[0] == 1:
        return 1.0 if a[0, 0] > 0 else math.inf
    try:
        low = cholesky(a)
    except NotSPDError:
        return math.inf
    lam_max = _power_iteration(lambda v: a @ v, a.shape[0])
    inv_lam = _power_iteration(lambda v: spd_solve(a, v, factor=low), a.shape[0])
    if inv_lam <= 0.0 or lam_max <= 0.0:
        return math.inf
    return lam_max * inv_lam


@dataclass(frozen=True)
class PrecisionBlocks:
    """Quadrant blocks of the inverse of a 2k x 2k SPD matrix.

    The joint matrix is ordered with the k value coordinates first and the k
    control coordinates second, so ``h11`` is the value-value block of the
    precision matrix and ``h21`` the control-value block.
    """

    h11: np.ndarray
    h12: np.ndarray
    h21: np.ndarray
    h22: np.ndarray

    @property
    def dim(self) -> int:
        return self.h11.shape[0]

    def assembled(self) -> np.ndarray:
        return np.block([[self.h11, self.h12], [self.h21, self.h22]])


def precision_blocks(joint: np.ndarray) -> PrecisionBlocks:
    """Invert a 2k x 2k SPD matrix and partition it into k x k quadrants."""
    joint = _check_symmetric(joint)
    if joint.shape[0] % 2 != 0:
        raise ValueError("joint matrix must have even dimension")
    k = joint.shape[0] // 2
    inv = spd_inverse(joint)
    return PrecisionBlocks(
        h11=inv[:k, :k], h12=inv[:k, k:], h21=inv[k:, :k], h22=inv[k:, k:]
    )
