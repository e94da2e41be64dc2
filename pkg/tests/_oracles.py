"""Independent reference implementations used to check the package.

Everything here is deliberately written from scratch (plain loops, bisection,
brute-force sums) and never calls into the package's computational paths.
"""

from __future__ import annotations

from collections import deque

import numpy as np


def newton_logit(design: np.ndarray, d: np.ndarray, tol: float = 1e-13,
                 max_iter: int = 200) -> np.ndarray:
    """Textbook Newton-Raphson for the logit MLE of d on the design matrix."""
    design = np.asarray(design, dtype=float)
    d = np.asarray(d, dtype=float)
    beta = np.zeros(design.shape[1])
    for _ in range(max_iter):
        eta = design @ beta
        p = 1.0 / (1.0 + np.exp(-eta))
        score = design.T @ (d - p)
        if np.max(np.abs(score)) < tol * design.shape[0]:
            break
        w = p * (1.0 - p)
        hessian = design.T @ (design * w[:, None])
        beta = beta + np.linalg.solve(hessian, score)
    return beta


def bisect(f, lo: float, hi: float, tol: float = 1e-12,
           max_iter: int = 200) -> float:
    """Scalar bisection; f(lo) and f(hi) must bracket a root."""
    flo = f(lo)
    if flo == 0.0:
        return lo
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        fmid = f(mid)
        if fmid == 0.0 or (hi - lo) < tol:
            return mid
        if (flo < 0) == (fmid < 0):
            lo, flo = mid, fmid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _sigmoid(t: float) -> float:
    return 1.0 / (1.0 + np.exp(-t))


def two_node_fixed_point(a: float, b: float, lam: float) -> tuple[float, float]:
    """Solve p1 = s(a + lam p2), p2 = s(b + lam p1) by scalar bisection on p2."""

    def residual(p2: float) -> float:
        p1 = _sigmoid(a + lam * p2)
        return p2 - _sigmoid(b + lam * p1)

    p2 = bisect(residual, 0.0, 1.0, tol=1e-14)
    return _sigmoid(a + lam * p2), p2


def wls(design: np.ndarray, y: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Closed-form least squares on the masked rows via the normal equations."""
    x = np.asarray(design, dtype=float)[mask]
    yy = np.asarray(y, dtype=float)[mask]
    return np.linalg.solve(x.T @ x, x.T @ yy)


def bfs_distances(n: int, edges: np.ndarray) -> np.ndarray:
    """All-pairs path distances by plain queue BFS; inf when unreachable."""
    adjacency = [[] for _ in range(n)]
    for u, v in np.asarray(edges).reshape(-1, 2):
        adjacency[int(u)].append(int(v))
        adjacency[int(v)].append(int(u))
    dist = np.full((n, n), np.inf)
    for source in range(n):
        dist[source, source] = 0.0
        queue = deque([source])
        while queue:
            node = queue.popleft()
            for nxt in adjacency[node]:
                if np.isinf(dist[source, nxt]):
                    dist[source, nxt] = dist[source, node] + 1.0
                    queue.append(nxt)
    return dist


def parzen_weight(z: float) -> float:
    z = abs(z)
    if z <= 0.5:
        return 1.0 - 6.0 * z * z + 6.0 * z ** 3
    if z <= 1.0:
        return 2.0 * (1.0 - z) ** 3
    return 0.0


def brute_force_hac(centered: np.ndarray, distances: np.ndarray,
                    b_n: float) -> np.ndarray:
    """O(n^2) double sum over all node pairs with Parzen distance weights."""
    n, k = centered.shape
    omega = np.zeros((k, k))
    for i in range(n):
        for j in range(n):
            dij = distances[i, j]
            if np.isinf(dij):
                continue
            weight = parzen_weight(dij / b_n)
            if weight == 0.0:
                continue
            omega += weight * np.outer(centered[i], centered[j])
    omega /= n
    return 0.5 * (omega + omega.T)


def fd_equilibrium_jacobian(g, z_design, params, solve, h: float = 1e-6):
    """Central finite differences of the equilibrium propensities.

    ``solve`` is a callable (g, z_design, params) -> propensity vector; the
    package's solver is passed in by the test, run at a tight tolerance so the
    quotient is clean.
    """
    from netmee.equilibrium import FirstStageParams

    beta = params.beta_d
    k = beta.shape[0]
    n = z_design.shape[0]
    dp_dbeta = np.empty((n, k))
    for j in range(k):
        up, down = beta.copy(), beta.copy()
        up[j] += h
        down[j] -= h
        p_up = solve(g, z_design, FirstStageParams(up, params.lam))
        p_down = solve(g, z_design, FirstStageParams(down, params.lam))
        dp_dbeta[:, j] = (p_up - p_down) / (2.0 * h)
    p_up = solve(g, z_design, FirstStageParams(beta, params.lam + h))
    p_down = solve(g, z_design, FirstStageParams(beta, params.lam - h))
    dp_dlam = (p_up - p_down) / (2.0 * h)
    return dp_dbeta, dp_dlam
