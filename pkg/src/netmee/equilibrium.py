"""Rational-expectations fixed point for treatment propensities.

Each node's take-up probability solves

    P_i = logistic(z_i' beta_d + lam * mean of P over neighbors of i),

a contraction whenever ``|lam| < 4`` because the logistic density is bounded
by 1/4 and the row-normalized adjacency has unit row sums. The solver also
produces the Jacobian of P with respect to (beta_d, lam), obtained from the
implicit linear system

    (I - lam * W @ Atilde) dP = W @ b,   W = diag(P * (1 - P)),

with b the relevant design column (or the neighbor average of P for lam).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as sparse_linalg
from scipy.special import expit

from .errors import ConvergenceError, ValidationError
from .graph import Graph

__all__ = [
    "P_CLIP",
    "FirstStageParams",
    "EquilibriumState",
    "logistic",
    "solve_equilibrium",
    "propensity_jacobian",
]

P_CLIP = 1e-5
"""Propensities are clipped into [P_CLIP, 1 - P_CLIP] after convergence."""

LAMBDA_BOUND = 4.0

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 10_000

# Linear-solver selection thresholds for propensity_jacobian.
_DENSE_MAX_N = 5000
_SPARSE_MIN_N = 200
_SPARSE_MAX_DENSITY = 0.02


def logistic(t):
    """Standard logistic CDF, 1 / (1 + exp(-t)); saturates cleanly at extremes."""
    return expit(t)


@dataclass(frozen=True)
class FirstStageParams:
    """Treatment-choice coefficients: design part and spillover strength.

    ``beta_d`` includes the intercept as its first entry. The spillover
    coefficient must satisfy ``|lam| < 4`` or the equilibrium may fail to be
    unique.
    """

    beta_d: np.ndarray
    lam: float

    def __post_init__(self):
        beta = np.array(self.beta_d, dtype=float, copy=True).reshape(-1)
        beta.setflags(write=False)
        object.__setattr__(self, "beta_d", beta)
        object.__setattr__(self, "lam", float(self.lam))
        if not np.all(np.isfinite(beta)) or not np.isfinite(self.lam):
            raise ValidationError("first-stage parameters must be finite")
        if abs(self.lam) >= LAMBDA_BOUND:
            raise ValidationError(
                f"spillover coefficient must satisfy |lam| < {LAMBDA_BOUND}, "
                f"got {self.lam}"
            )


@dataclass(frozen=True)
class EquilibriumState:
    """Converged propensities and, optionally, their parameter Jacobian.

    ``p`` is clipped into [P_CLIP, 1 - P_CLIP]; the clipped values feed every
    downstream formula. ``dp_dbeta`` has one column per entry of ``beta_d``.
    """

    p: np.ndarray
    dp_dbeta: np.ndarray | None
    dp_dlam: np.ndarray | None
    iterations: int
    residual: float
    shares: np.ndarray = field(repr=False, default=None)  # neighbor mean of p


def solve_equilibrium(
    g: Graph,
    z_design: np.ndarray,
    params: FirstStageParams,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    derivatives: bool = True,
    p0: np.ndarray | None = None,
    jacobian_method: str = "auto",
) -> EquilibriumState:
    """Iterate the belief map from P = 0.5 until the sup-norm update is < tol.

    Uniqueness of the limit makes the starting point irrelevant; ``p0`` only
    warm-starts the iteration. Clipping is applied once after convergence so
    the fixed point itself is not perturbed.
    """
    z_design = np.asarray(z_design, dtype=float)
    if z_design.ndim != 2 or z_design.shape[0] != g.n:
        raise ValidationError(
            f"design matrix must be (n, k) with n={g.n}, got {z_design.shape}"
        )
    if z_design.shape[1] != params.beta_d.shape[0]:
        raise ValidationError(
            f"design has {z_design.shape[1]} columns but beta_d has "
            f"{params.beta_d.shape[0]} entries"
        )
    if tol <= 0:
        raise ValidationError(f"tol must be positive, got {tol}")

    index = z_design @ params.beta_d
    lam = params.lam
    tilde = g.row_normalized
    p = np.full(g.n, 0.5) if p0 is None else np.clip(np.asarray(p0, float), 0.0, 1.0)
    residual = np.inf
    iterations = 0
    if lam == 0.0 or g.edge_count == 0:
        # No coupling across nodes: one update is exact.
        p = expit(index)
        residual = 0.0
        iterations = 1
    else:
        for iterations in range(1, max_iter + 1):
            new = expit(index + lam * (tilde @ p))
            residual = float(np.max(np.abs(new - p)))
            p = new
            if residual < tol:
                break
        else:
            raise ConvergenceError(
                f"equilibrium did not converge in {max_iter} iterations "
                f"(last update {residual:.3e})",
                residual=residual,
            )

    p = np.clip(p, P_CLIP, 1.0 - P_CLIP)
    shares = tilde @ p
    dp_dbeta = dp_dlam = None
    if derivatives:
        dp_dbeta, dp_dlam = propensity_jacobian(
            g, z_design, params, p, method=jacobian_method
        )
    return EquilibriumState(
        p=p,
        dp_dbeta=dp_dbeta,
        dp_dlam=dp_dlam,
        iterations=iterations,
        residual=residual,
        shares=shares,
    )


def propensity_jacobian(
    g: Graph,
    z_design: np.ndarray,
    params: FirstStageParams,
    p: np.ndarray,
    method: str = "auto",
) -> tuple[np.ndarray, np.ndarray]:
    """Differentiate the equilibrium propensities in the model parameters.

    Solves ``(I - lam * W @ Atilde) X = W @ B`` where ``W = diag(p * (1 - p))``
    and ``B`` stacks the design columns and the neighbor average of ``p``.
    The system matrix is strictly diagonally dominant for ``|lam| < 4``, so a
    failure signals an internal invariant violation rather than a user error.

    ``method``: "dense" (LAPACK), "sparse" (direct factorization), "iterative"
    (Krylov with a direct fallback), or "auto" to pick by size and density.
    All paths agree to at least 1e-8.
    """
    z_design = np.asarray(z_design, dtype=float)
    p = np.asarray(p, dtype=float)
    n = g.n
    w = p * (1.0 - p)
    lam = params.lam
    tilde = g.row_normalized
    rhs = np.column_stack([z_design, np.asarray(tilde @ p)])
    rhs = w[:, None] * rhs

    if method == "auto":
        density = g.adjacency.nnz / max(n * n, 1)
        if n <= _SPARSE_MIN_N:
            method = "dense"
        elif n <= _DENSE_MAX_N:
            method = "sparse" if density <= _SPARSE_MAX_DENSITY else "dense"
        else:
            method = "iterative"

    if lam == 0.0 or g.edge_count == 0:
        solution = rhs
    elif method == "dense":
        system = np.eye(n) - lam * (w[:, None] * tilde.toarray())
        try:
            solution = np.linalg.solve(system, rhs)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - invariant breach
            raise ConvergenceError(f"singular propensity system: {exc}") from exc
    elif method == "sparse":
        system = sparse.identity(n, format="csc") - lam * (
            sparse.diags(w) @ tilde
        ).tocsc()
        solution = sparse_linalg.splu(system).solve(rhs)
    elif method == "iterative":
        system = sparse.identity(n, format="csr") - lam * (sparse.diags(w) @ tilde)
        cols = []
        for k in range(rhs.shape[1]):
            x, info = sparse_linalg.bicgstab(
                system, rhs[:, k], rtol=1e-13, atol=1e-14, maxiter=400
            )
            if info != 0:
                x = sparse_linalg.splu(system.tocsc()).solve(rhs[:, k])
            cols.append(x)
        solution = np.column_stack(cols)
    else:
        raise ValidationError(f"unknown jacobian method {method!r}")

    return np.ascontiguousarray(solution[:, :-1]), np.ascontiguousarray(solution[:, -1])
