"""Brute-force constrained minimizer used as the weight-formula oracle.

Minimizes  sum_i v_i' S_i v_i  over per-policy vectors v_i whose leading
``alpha_len`` coordinates satisfy the per-horizon sum-to-one constraint
across policies (remaining coordinates unconstrained).  Projected steepest
descent with exact line search; completely independent of the closed-form
solutions in the package.
"""

import numpy as np


def constrained_minimizer(blocks, alpha_len, max_iter=200_000, tol=1e-16):
    m = len(blocks)
    sizes = [b.shape[0] for b in blocks]
    starts = np.cumsum([0] + sizes)
    x = np.zeros(starts[-1])
    for i in range(m):
        x[starts[i] : starts[i] + alpha_len] = 1.0 / m

    alpha_idx = [
        np.array([starts[i] + t for i in range(m)]) for t in range(alpha_len)
    ]

    def gradient(vec):
        g = np.zeros_like(vec)
        for i in range(m):
            seg = slice(starts[i], starts[i + 1])
            g[seg] = 2.0 * blocks[i] @ vec[seg]
        return g

    for _ in range(max_iter):
        g = gradient(x)
        for idx in alpha_idx:  # project onto the tangent of the constraints
            g[idx] -= g[idx].mean()
        gnorm2 = float(g @ g)
        if gnorm2 < tol:
            break
        curvature = 0.0
        for i in range(m):
            seg = slice(starts[i], starts[i + 1])
            curvature += float(g[seg] @ blocks[i] @ g[seg])
        if curvature <= 0:
            break
        x = x - (gnorm2 / (2.0 * curvature)) * g
    return [x[starts[i] : starts[i + 1]] for i in range(m)]


def random_spd(rng, dim, lo=0.5, hi=5.0):
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q @ np.diag(rng.uniform(lo, hi, size=dim)) @ q.T
