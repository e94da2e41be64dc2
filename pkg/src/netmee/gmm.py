"""Two-step GMM on the stacked moment system.

The system is just identified, so the point estimate is the root of the
sample moments and the weight matrix only matters for standard errors. The
root is found by damped Newton with a finite-difference Jacobian, warm
started from the sequential estimator: a nested-fixed-point likelihood Newton
solve for (beta_d, lam), then per-cell least squares for the outcome blocks.
That warm start is itself an exact root up to solver tolerance, so the Newton
polish normally accepts it immediately.

Step two re-weights with the inverse of the PSD-repaired network HAC matrix
and reports the sandwich covariance

    (G' Xi G)^{-1} G' Xi Omega_g Xi G (G' Xi G)^{-1},

where G is the central-difference Jacobian of the mean moments.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from scipy.stats import chi2, norm

from .data import Dataset
from .equilibrium import FirstStageParams
from .errors import ConvergenceError, RankDeficiencyError, ValidationError
from .exposure import ExposureLabel, cell_counts
from .graph import DistanceIndex, Graph, bfs_layers
from .hac import HacConfig, bandwidth, hac_covariance, psd_repair
from .moments import (
    CellParams,
    MomentProblem,
    ParamLayout,
    ParamVector,
    conditional_mean_v,
    first_stage_scores,
)

__all__ = [
    "GmmResult",
    "solve_step1",
    "solve_step2",
    "two_step",
    "confidence_interval",
    "wald_test",
    "sequential_estimate",
    "write_estimates_csv",
    "write_covariance_csv",
    "load_estimates_artifact",
]

GRAD_TOL = 1e-8
STEP_TOL = 1e-10
MAX_NEWTON_ITER = 200
MAX_RESTARTS = 5
_RESTART_SEED = 20240

_NAME_RE = re.compile(r"^(beta_D(\d+)|lambda|beta_X(\d+)_([01])([01])|beta_p_([01])([01]))$")


@dataclass(frozen=True)
class GmmResult:
    """Estimates with HAC weight, moment Jacobian, and sandwich covariance.

    ``omega_beta`` is the covariance of sqrt(n) times the estimator, so
    per-parameter standard errors are ``sqrt(diag(omega_beta) / n)``.
    """

    layout: ParamLayout
    beta: ParamVector
    flat: np.ndarray
    std_err: np.ndarray
    omega_g: np.ndarray | None
    g_jacobian: np.ndarray | None
    omega_beta: np.ndarray
    objective: float
    converged: bool
    psd_repaired: bool
    n: int
    diagnostics: dict = field(default_factory=dict, repr=False)

    @property
    def names(self) -> list[str]:
        return self.layout.names

    def scaled_covariance(self) -> np.ndarray:
        """Covariance of the estimates themselves: omega_beta / n."""
        return self.omega_beta / self.n


@dataclass
class _NewtonInfo:
    converged: bool
    iterations: int
    grad_norm: float
    objective: float
    objective_history: list[float]


def _block_of(name: str) -> str:
    if name.startswith("beta_D") or name == "lambda":
        return "first stage"
    tag = name[-2:]
    return f"cell ({tag[0]},{tag[1]})"


def _raise_rank_deficient(matrix: np.ndarray, layout: ParamLayout) -> None:
    _, _, vt = np.linalg.svd(matrix)
    direction = vt[-1]
    idx = int(np.argmax(np.abs(direction)))
    name = layout.names[idx]
    raise RankDeficiencyError(
        f"moment system is rank deficient; weakest direction loads on "
        f"parameter '{name}' in block {_block_of(name)}"
    )


def _solve_square(jac: np.ndarray, rhs: np.ndarray, layout: ParamLayout) -> np.ndarray:
    s = np.linalg.svd(jac, compute_uv=False)
    if s[-1] <= s[0] * 1e-13 or s[-1] == 0.0:
        _raise_rank_deficient(jac, layout)
    return np.linalg.solve(jac, rhs)


def _newton_root(
    problem: MomentProblem,
    x0: np.ndarray,
    weight: np.ndarray | None = None,
    gtol: float = GRAD_TOL,
    step_tol: float = STEP_TOL,
    max_iter: int = MAX_NEWTON_ITER,
) -> tuple[np.ndarray, _NewtonInfo]:
    """Damped Newton on the mean moments with a monotone line search.

    The objective is the quadratic form of the mean moments in ``weight``
    (identity when None); convergence is declared when the sup norm of the
    moments falls below ``gtol`` or the accepted step is below ``step_tol``.
    """

    def objective(g: np.ndarray) -> float:
        return float(g @ weight @ g) if weight is not None else float(g @ g)

    x = np.asarray(x0, dtype=float).copy()
    g = problem.gbar(x)
    history = [objective(g)]
    if np.max(np.abs(g)) < gtol:
        return x, _NewtonInfo(True, 0, float(np.max(np.abs(g))), history[-1], history)

    for iteration in range(1, max_iter + 1):
        jac = problem.jacobian_fd(x)
        step = _solve_square(jac, -g, problem.layout)
        current = history[-1]
        alpha = 1.0
        accepted = False
        while alpha >= 1e-12:
            candidate = x + alpha * step
            try:
                g_new = problem.gbar(candidate)
            except (ValidationError, ConvergenceError):
                alpha *= 0.5
                continue
            value = objective(g_new)
            if value < current:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            return x, _NewtonInfo(
                False, iteration, float(np.max(np.abs(g))), current, history
            )
        x = candidate
        g = g_new
        history.append(value)
        gnorm = float(np.max(np.abs(g)))
        if gnorm < gtol or alpha * float(np.max(np.abs(step))) < step_tol:
            return x, _NewtonInfo(True, iteration, gnorm, value, history)

    return x, _NewtonInfo(
        False, max_iter, float(np.max(np.abs(g))), history[-1], history
    )


def _plain_logit(z_design: np.ndarray, d: np.ndarray, tol: float = 1e-12,
                 max_iter: int = 100) -> np.ndarray:
    """Newton (IRLS) fit of the network-free logit of d on the design."""
    n, k = z_design.shape
    beta = np.zeros(k)
    for _ in range(max_iter):
        p = expit(z_design @ beta)
        grad = z_design.T @ (d - p) / n
        if np.max(np.abs(grad)) < tol:
            break
        w = np.maximum(p * (1.0 - p), 1e-10)
        hess = (z_design * w[:, None]).T @ z_design / n
        beta = beta + np.linalg.solve(hess, grad)
    return beta


def _first_stage_mle(
    problem: MomentProblem, start: FirstStageParams, tol: float = 1e-12,
    max_iter: int = 60,
) -> FirstStageParams:
    """Damped Newton on the first-stage score system, equilibrium re-solved per step."""
    g = problem.graph
    zd = problem.data.z_design
    d = problem.data.d

    def score(v: np.ndarray) -> np.ndarray:
        first = FirstStageParams(beta_d=v[:-1], lam=v[-1])
        state = problem.equilibrium(first)
        return first_stage_scores(state, g, zd, d, first).mean(axis=0)

    v = np.concatenate([start.beta_d, [start.lam]])
    s = score(v)
    for _ in range(max_iter):
        if np.max(np.abs(s)) < tol:
            break
        k = v.size
        jac = np.empty((k, k))
        for j in range(k):
            h = 1e-6 * max(1.0, abs(v[j]))
            up, down = v.copy(), v.copy()
            up[j] += h
            down[j] -= h
            jac[:, j] = (score(up) - score(down)) / (2.0 * h)
        step = np.linalg.solve(jac, -s)
        alpha = 1.0
        current = float(s @ s)
        while alpha >= 1e-12:
            cand = v + alpha * step
            if abs(cand[-1]) >= 3.995:
                alpha *= 0.5
                continue
            s_new = score(cand)
            if float(s_new @ s_new) < current:
                break
            alpha *= 0.5
        else:
            break
        v, s = cand, s_new
    return FirstStageParams(beta_d=v[:-1], lam=v[-1])


def _cell_least_squares(data: Dataset, p: np.ndarray, t: ExposureLabel) -> CellParams:
    """Exact within-cell least squares of y on (x, m); root of that cell's moments."""
    m = conditional_mean_v(p, t.own)
    mask = (data.labels[:, 0] == t.own) & (data.labels[:, 1] == t.neigh)
    design = np.column_stack([data.x_design, m])[mask]
    solution, *_ = np.linalg.lstsq(design, data.y[mask], rcond=None)
    return CellParams(beta_x=solution[:-1], beta_p=solution[-1])


def sequential_estimate(problem: MomentProblem) -> ParamVector:
    """Exact sequential root: first-stage MLE, then per-cell least squares."""
    layout = problem.layout
    beta_logit = _plain_logit(problem.data.z_design, problem.data.d.astype(float))
    if layout.lambda_active:
        first = _first_stage_mle(problem, FirstStageParams(beta_d=beta_logit, lam=0.0))
    else:
        first = FirstStageParams(beta_d=beta_logit, lam=0.0)
    state = problem.equilibrium(first)
    cells = {t: _cell_least_squares(problem.data, state.p, t) for t in layout.labels}
    return ParamVector(first=first, cells=cells)


def _jitter(x: np.ndarray, layout: ParamLayout, attempt: int) -> np.ndarray:
    rng = np.random.default_rng(_RESTART_SEED + attempt)
    out = x + 0.05 * (1.0 + np.abs(x)) * rng.standard_normal(x.size)
    lam_idx = layout.lam_index()
    if lam_idx is not None:
        out[lam_idx] = np.clip(out[lam_idx], -3.9, 3.9)
    return out


def _rooted_solve(
    problem: MomentProblem, x0: np.ndarray, weight: np.ndarray | None
) -> tuple[np.ndarray, _NewtonInfo]:
    x, info = _newton_root(problem, x0, weight=weight)
    best = (info.objective, x, info)
    attempt = 0
    while not info.converged and attempt < MAX_RESTARTS:
        attempt += 1
        x, info = _newton_root(problem, _jitter(best[1], problem.layout, attempt),
                               weight=weight)
        if info.objective < best[0]:
            best = (info.objective, x, info)
    if not info.converged:
        _, x, info = best
        if not info.converged:
            raise ConvergenceError(
                f"GMM root solve failed after {MAX_RESTARTS} restarts "
                f"(objective {info.objective:.3e}, "
                f"moment sup-norm {info.grad_norm:.3e})",
                residual=info.grad_norm,
                objective=info.objective,
            )
    return x, info


def solve_step1(problem: MomentProblem, start: ParamVector | None = None) -> ParamVector:
    """Drive the sample moments to zero under the identity weight."""
    if start is None:
        start = sequential_estimate(problem)
    x0 = problem.layout.pack(start)
    x, _ = _rooted_solve(problem, x0, weight=None)
    return problem.layout.unpack(x)


def solve_step2(
    problem: MomentProblem,
    step1: ParamVector,
    hac_cfg: HacConfig = HacConfig(),
    dist: DistanceIndex | None = None,
) -> GmmResult:
    """HAC-weighted second step with sandwich covariance.

    At a just-identified root the re-weighting cannot move the point
    estimate; it fixes the standard errors. The moment Jacobian is computed
    by central finite differences with the equilibrium re-solved whenever a
    first-stage coordinate is perturbed.
    """
    layout = problem.layout
    g = problem.graph
    n = problem.data.n
    b_n = bandwidth(n, g.average_degree, hac_cfg)
    max_lag = int(math.floor(b_n))
    if dist is None:
        dist = bfs_layers(g, max_lag)

    x1 = layout.pack(step1)
    evaluation = problem.evaluate(step1)
    centered = evaluation.rows - evaluation.mean
    omega_g, repaired = psd_repair(hac_covariance(centered, dist, b_n))
    xi = np.linalg.inv(omega_g)
    xi = 0.5 * (xi + xi.T)

    x2, info = _rooted_solve(problem, x1, weight=xi)
    g_jacobian = problem.jacobian_fd(x2)

    inner = g_jacobian.T @ xi @ g_jacobian
    s = np.linalg.svd(inner, compute_uv=False)
    if s[-1] <= s[0] * 1e-13 or s[-1] == 0.0:
        _raise_rank_deficient(g_jacobian, layout)
    bread = np.linalg.inv(inner)
    meat = g_jacobian.T @ xi @ omega_g @ xi @ g_jacobian
    omega_beta = bread @ meat @ bread
    omega_beta = 0.5 * (omega_beta + omega_beta.T)
    std_err = np.sqrt(np.diag(omega_beta) / n)

    state = problem.equilibrium(layout.unpack(x2).first)
    diagnostics = {
        "bandwidth": b_n,
        "max_lag": max_lag,
        "step2_iterations": info.iterations,
        "objective_history": info.objective_history,
        "moment_sup_norm": info.grad_norm,
        "equilibrium_iterations": state.iterations,
        "equilibrium_residual": state.residual,
        "cell_counts": {tuple(t): c for t, c in
                        cell_counts(problem.data.labels).items()},
    }
    return GmmResult(
        layout=layout,
        beta=layout.unpack(x2),
        flat=x2,
        std_err=std_err,
        omega_g=omega_g,
        g_jacobian=g_jacobian,
        omega_beta=omega_beta,
        objective=info.objective,
        converged=info.converged,
        psd_repaired=repaired,
        n=n,
        diagnostics=diagnostics,
    )


def two_step(
    g: Graph,
    data: Dataset,
    hac_cfg: HacConfig = HacConfig(),
    dist: DistanceIndex | None = None,
    layout: ParamLayout | None = None,
    eq_tol: float = 1e-13,
    eq_max_iter: int = 10_000,
) -> GmmResult:
    """Convenience wrapper running both GMM steps on a sample."""
    problem = MomentProblem(
        g, data, layout=layout, eq_tol=eq_tol, eq_max_iter=eq_max_iter
    )
    step1 = solve_step1(problem)
    return solve_step2(problem, step1, hac_cfg=hac_cfg, dist=dist)


def confidence_interval(res: GmmResult, level: float = 0.95) -> np.ndarray:
    """Per-parameter normal confidence bounds, shape (d, 2)."""
    if not res.converged:
        raise ValidationError("cannot build intervals from a non-converged result")
    if not 0.0 < level < 1.0:
        raise ValidationError(f"level must be in (0, 1), got {level}")
    z = norm.ppf(0.5 + level / 2.0)
    lo = res.flat - z * res.std_err
    hi = res.flat + z * res.std_err
    return np.column_stack([lo, hi])


def wald_test(res: GmmResult, r, big_r, k: int) -> tuple[float, float]:
    """Wald statistic n * r'(R' Omega_beta R)^{-1} r and its chi-square p-value.

    ``r`` and ``big_r`` may be callables of the flat estimate or precomputed
    arrays; ``big_r`` must be d x k of full column rank at the estimate.
    """
    value = np.atleast_1d(np.asarray(r(res.flat) if callable(r) else r, dtype=float))
    if value.shape != (k,):
        raise ValidationError(f"restriction value must have shape ({k},)")
    jac = np.asarray(big_r(res.flat) if callable(big_r) else big_r, dtype=float)
    jac = jac.reshape(res.flat.size, k)
    inner = jac.T @ res.omega_beta @ jac
    s = np.linalg.svd(inner, compute_uv=False)
    if s[-1] <= max(s[0], 1.0) * 1e-13:
        raise RankDeficiencyError("restriction Jacobian has deficient rank")
    stat = float(res.n * value @ np.linalg.solve(inner, value))
    return stat, float(chi2.sf(stat, k))


def write_estimates_csv(path, res: GmmResult, level: float = 0.95) -> None:
    """Emit param,estimate,std_error,ci_lower,ci_upper in flat-layout order."""
    ci = confidence_interval(res, level)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["param", "estimate", "std_error", "ci_lower", "ci_upper"])
        for name, est, se, (lo, hi) in zip(res.names, res.flat, res.std_err, ci):
            writer.writerow([name, repr(float(est)), repr(float(se)),
                             repr(float(lo)), repr(float(hi))])


def write_covariance_csv(path, res: GmmResult) -> None:
    """Emit the covariance of the estimates (omega_beta / n) with name labels."""
    cov = res.scaled_covariance()
    names = res.names
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["param"] + names)
        for name, row in zip(names, cov):
            writer.writerow([name] + [repr(float(v)) for v in row])


def _layout_from_names(names: list[str]) -> ParamLayout:
    dim_z = -1
    lambda_active = False
    labels: list[ExposureLabel] = []
    x_counts: dict[ExposureLabel, int] = {}
    for name in names:
        match = _NAME_RE.match(name)
        if match is None:
            raise ValidationError(f"unrecognized parameter name {name!r}")
        if name.startswith("beta_D"):
            dim_z = max(dim_z, int(match.group(2)))
        elif name == "lambda":
            lambda_active = True
        elif name.startswith("beta_X"):
            t = ExposureLabel(int(match.group(4)), int(match.group(5)))
            x_counts[t] = max(x_counts.get(t, 0), int(match.group(3)))
            if t not in labels:
                labels.append(t)
        else:
            t = ExposureLabel(int(match.group(6)), int(match.group(7)))
            if t not in labels:
                labels.append(t)
    if dim_z < 0 or not labels:
        raise ValidationError("parameter names do not describe a full layout")
    dims = set(x_counts.values())
    if len(dims) != 1:
        raise ValidationError("inconsistent covariate dimension across cells")
    layout = ParamLayout(
        dim_z=dim_z,
        dim_x=dims.pop(),
        lambda_active=lambda_active,
        labels=tuple(labels),
    )
    if layout.names != names:
        raise ValidationError("parameter names are not in flat-layout order")
    return layout


def load_estimates_artifact(estimates_path, covariance_path) -> GmmResult:
    """Rebuild a result shell from emitted estimates and covariance files.

    The shell carries estimates and the scaled covariance (stored with n = 1),
    which is all the effects calculations need; HAC and Jacobian pieces are
    absent.
    """
    names: list[str] = []
    estimates: list[float] = []
    std_errs: list[float] = []
    with open(estimates_path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"param", "estimate", "std_error", "ci_lower", "ci_upper"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValidationError(
                f"{estimates_path}: expected columns {sorted(required)}"
            )
        for row in reader:
            names.append(row["param"])
            estimates.append(float(row["estimate"]))
            std_errs.append(float(row["std_error"]))
    layout = _layout_from_names(names)

    with open(covariance_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0] != "param" or header[1:] != names:
            raise ValidationError(
                f"{covariance_path}: covariance header does not match estimates"
            )
        rows = []
        for row in reader:
            if row[0] != names[len(rows)]:
                raise ValidationError(
                    f"{covariance_path}: row order does not match estimates"
                )
            rows.append([float(v) for v in row[1:]])
    cov = np.asarray(rows)
    if cov.shape != (len(names), len(names)):
        raise ValidationError(f"{covariance_path}: covariance must be square")

    flat = np.asarray(estimates)
    return GmmResult(
        layout=layout,
        beta=layout.unpack(flat),
        flat=flat,
        std_err=np.asarray(std_errs),
        omega_g=None,
        g_jacobian=None,
        omega_beta=cov,
        objective=float("nan"),
        converged=True,
        psd_repaired=False,
        n=1,
        diagnostics={"source": str(estimates_path)},
    )
