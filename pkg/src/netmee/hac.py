"""Network HAC covariance of moment rows with Parzen kernel weights.

Cross-products are accumulated over exact graph-distance lags s = 0..floor(b)
and downweighted by the Parzen kernel at s/b, where the bandwidth b grows
like log(n) / log(average degree). A small eigenvalue floor repairs the rare
non-positive-definite estimate so it can be inverted as a GMM weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .graph import DistanceIndex

__all__ = ["HacConfig", "parzen", "bandwidth", "hac_covariance", "psd_repair"]

EIGENVALUE_FLOOR = 1e-10


@dataclass(frozen=True)
class HacConfig:
    """Bandwidth constant and degree floor; the kernel is fixed to Parzen."""

    c: float = 2.0
    epsilon: float = 0.05

    def __post_init__(self):
        if self.c <= 0:
            raise ValidationError(f"bandwidth constant must be > 0, got {self.c}")
        if self.epsilon <= 0:
            raise ValidationError(f"degree floor must be > 0, got {self.epsilon}")


def parzen(z) -> np.ndarray | float:
    """Parzen kernel: 1 - 6z^2 + 6|z|^3 on [0, 1/2], 2(1-|z|)^3 on (1/2, 1], else 0."""
    z = np.abs(np.asarray(z, dtype=float))
    out = np.where(
        z <= 0.5,
        1.0 - 6.0 * z**2 + 6.0 * z**3,
        np.where(z <= 1.0, 2.0 * (1.0 - z) ** 3, 0.0),
    )
    return float(out) if out.ndim == 0 else out


def bandwidth(n: int, avg_deg: float, cfg: HacConfig) -> float:
    """Lag bandwidth c * log(n) / log(max(avg_deg, 1 + epsilon))."""
    if n < 2:
        raise ValidationError(f"bandwidth needs n >= 2, got {n}")
    return cfg.c * math.log(n) / math.log(max(avg_deg, 1.0 + cfg.epsilon))


def hac_covariance(rows: np.ndarray, dist: DistanceIndex, b_n: float) -> np.ndarray:
    """Kernel-weighted sum of lag cross-products of demeaned moment rows.

    ``rows`` must already be demeaned. Lag s contributes
    ``parzen(s / b_n) / n * sum over ordered pairs at distance exactly s`` of
    the row outer products; s = 0 is the sample covariance term. Pairs beyond
    ``floor(b_n)`` carry zero kernel weight and are skipped, which is why the
    distance index must cover that radius. The result is symmetrized.
    """
    rows = np.asarray(rows, dtype=float)
    n = rows.shape[0]
    if dist.n != n:
        raise ValidationError(f"distance index is for n={dist.n}, rows have n={n}")
    max_lag = int(math.floor(b_n))
    if dist.radius < max_lag:
        raise ValidationError(
            f"distance index radius {dist.radius} is below floor(b_n)={max_lag}"
        )
    omega = rows.T @ rows / n
    for s in range(1, max_lag + 1):
        weight = parzen(s / b_n)
        if weight == 0.0:
            continue
        pairs = dist.pairs(s)
        if pairs.nnz == 0:
            continue
        omega += weight * (rows.T @ (pairs @ rows)) / n
    return 0.5 * (omega + omega.T)


def psd_repair(m: np.ndarray) -> tuple[np.ndarray, bool]:
    """Floor the eigenvalues of a symmetric matrix at 1e-10.

    Returns the repaired matrix and whether any flooring occurred. An
    already positive-definite input passes through up to re-assembly error.
    """
    m = np.asarray(m, dtype=float)
    values, vectors = np.linalg.eigh(0.5 * (m + m.T))
    floored = bool(np.any(values < EIGENVALUE_FLOOR))
    if not floored:
        return m, False
    repaired = (vectors * np.maximum(values, EIGENVALUE_FLOOR)) @ vectors.T
    repaired = 0.5 * (repaired + repaired.T)
    # Reassembly roundoff (~ norm * machine eps) can undercut the floor; nudge
    # with a margin above the eigensolver's own noise.
    smallest = np.linalg.eigvalsh(repaired)[0]
    if smallest < EIGENVALUE_FLOOR:
        margin = 64.0 * np.finfo(float).eps * max(1.0, float(np.abs(values).max()))
        repaired = repaired + (EIGENVALUE_FLOOR - smallest + margin) * np.eye(m.shape[0])
    return repaired, True
