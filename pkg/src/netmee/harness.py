"""Data-generating process and Monte Carlo experiment runner.

Replication r derives its generator from ``(master_seed, spawn_key=(r,))``, a
splittable counter scheme, so replications are order-independent and can run
in parallel. Ring experiments reuse the fixed topology across replications;
random geometric graphs are redrawn each time because the node positions are
part of the common shock. Worker count is capped by the ``NETMEE_THREADS``
environment variable.
"""

from __future__ import annotations

import logging
import math
import multiprocessing
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .data import Dataset
from .effects import EffectQuery, mer
from .equilibrium import FirstStageParams, solve_equilibrium
from .errors import ConvergenceError, RankDeficiencyError, ValidationError
from .exposure import LABELS, ExposureLabel, exposure_map
from .gmm import GmmResult, two_step, wald_test
from .graph import DistanceIndex, Graph, bfs_layers, rgg, ring
from .hac import HacConfig, bandwidth
from .moments import CellParams, ParamLayout, ParamVector

__all__ = [
    "SimConfig",
    "McSummary",
    "MetricRow",
    "default_true_params",
    "generate_dataset",
    "run_mc",
    "write_mc_summary_csv",
    "max_workers",
]

logger = logging.getLogger(__name__)

FAILURE_WARN_FRACTION = 0.01
FAILURE_ABORT_FRACTION = 0.05


def default_true_params() -> ParamVector:
    """Baseline simulation truth for the scalar-covariate design.

    Outcome intercept/slope pairs are (2, 1) except (1, 2) for the label with
    no own or neighbor treatment; selection coefficients are (-1, 2) with
    spillover 1; heterogeneity slopes are 0.5, 1, 1, 1.5 across the labels
    (0,0), (1,0), (0,1), (1,1).
    """
    return ParamVector(
        first=FirstStageParams(beta_d=np.array([-1.0, 2.0]), lam=1.0),
        cells={
            ExposureLabel(0, 0): CellParams(beta_x=np.array([1.0, 2.0]), beta_p=0.5),
            ExposureLabel(1, 0): CellParams(beta_x=np.array([2.0, 1.0]), beta_p=1.0),
            ExposureLabel(0, 1): CellParams(beta_x=np.array([2.0, 1.0]), beta_p=1.0),
            ExposureLabel(1, 1): CellParams(beta_x=np.array([2.0, 1.0]), beta_p=1.5),
        },
    )


@dataclass(frozen=True)
class SimConfig:
    """One Monte Carlo experiment: topology, size, truth, HAC, and seeds."""

    topology: str = "ring"
    n: int = 1000
    reps: int = 300
    true_params: ParamVector = field(default_factory=default_true_params)
    hac: HacConfig = field(default_factory=HacConfig)
    master_seed: int = 20240
    kappa: float = 5.63
    p_grid: tuple[float, ...] = (0.2, 0.5, 0.8)
    x_eval: tuple[float, ...] = (1.0,)
    level: float = 0.95
    eq_tol: float = 1e-13
    eq_max_iter: int = 10_000

    def __post_init__(self):
        if self.topology not in ("ring", "rgg"):
            raise ValidationError(f"topology must be 'ring' or 'rgg', got {self.topology!r}")
        if self.reps < 1:
            raise ValidationError(f"reps must be >= 1, got {self.reps}")
        if self.topology == "rgg" and self.kappa <= 0:
            raise ValidationError("rgg topology needs kappa > 0")
        dim_x = len(self.x_eval)
        for t, cell in self.true_params.cells.items():
            if cell.beta_x.shape[0] != dim_x + 1:
                raise ValidationError(
                    f"x_eval has {dim_x} entries but cell {tuple(t)} expects "
                    f"{cell.beta_x.shape[0] - 1} covariates"
                )

    def x_design_point(self) -> np.ndarray:
        return np.concatenate([[1.0], np.asarray(self.x_eval, dtype=float)])


@dataclass(frozen=True)
class MetricRow:
    """Bias / dispersion / coverage metrics for one parameter or response.

    ``se_mean`` is the average reported standard error, for comparison with
    the Monte Carlo SD.
    """

    kind: str
    name: str
    true_value: float
    bias: float
    sd: float | None
    rmse: float
    coverage: float
    p: float | None = None
    wald_reject: float | None = None
    se_mean: float | None = None
    reps_used: int = 0


@dataclass(frozen=True)
class McSummary:
    """Aggregated experiment output; metric definitions are normative here.

    bias = mean(estimate) - truth, sd = sample SD across replications
    (absent below two used reps), rmse = sqrt(mean squared error vs truth),
    coverage = fraction of CIs containing the truth. Non-converged
    replications are excluded and counted in ``failures``.
    """

    config: SimConfig
    reps: int
    failures: int
    params: list[MetricRow]
    mers: list[MetricRow]

    @property
    def rows(self) -> list[MetricRow]:
        return self.params + self.mers

    def row(self, name: str, p: float | None = None) -> MetricRow:
        for candidate in self.rows:
            if candidate.name == name and (p is None or candidate.p == p):
                return candidate
        raise KeyError(f"no metric row named {name!r} (p={p})")


def generate_dataset(g: Graph, true_params: ParamVector,
                     rng: np.random.Generator) -> Dataset:
    """Draw one sample from the selection-and-outcome model at the given truth.

    Covariates and instruments are i.i.d. standard normal; the treatment is
    taken when the equilibrium payoff index beats a standard logistic private
    shock, and the outcome adds the label-specific heterogeneity slope on the
    uniform transform of that shock plus standard normal noise. The draw
    order (x, z, shock, outcome noise) is fixed for reproducibility.
    """
    first = true_params.first
    dim_z = first.beta_d.shape[0] - 1
    any_cell = next(iter(true_params.cells.values()))
    dim_x = any_cell.beta_x.shape[0] - 1
    n = g.n

    x = rng.standard_normal((n, dim_x))
    z = rng.standard_normal((n, dim_z))
    z_design = np.column_stack([np.ones(n), z])
    state = solve_equilibrium(g, z_design, first, derivatives=False)
    nu = rng.logistic(size=n)
    index = z_design @ first.beta_d + first.lam * state.shares
    d = (index >= nu).astype(np.int8)
    v = expit(nu)
    labels = exposure_map(g, d)

    x_design = np.column_stack([np.ones(n), x])
    y = rng.standard_normal(n)
    for t in LABELS:
        mask = (labels[:, 0] == t.own) & (labels[:, 1] == t.neigh)
        if not mask.any():
            continue
        cell = true_params.cells.get(t)
        if cell is None:
            raise ValidationError(f"true parameters lack cell {tuple(t)}")
        y[mask] += x_design[mask] @ cell.beta_x + cell.beta_p * v[mask]
    return Dataset(y=y, d=d, x=x, z=z, labels=labels)


def _full_layout(cfg: SimConfig) -> ParamLayout:
    return ParamLayout(
        dim_z=cfg.true_params.first.beta_d.shape[0] - 1,
        dim_x=len(cfg.x_eval),
        lambda_active=True,
        labels=LABELS,
    )


def _true_mer(cfg: SimConfig, t: ExposureLabel, p: float) -> float:
    cell = cfg.true_params.cells[t]
    return float(cfg.x_design_point() @ cell.beta_x + p * cell.beta_p)


def _mer_grid(cfg: SimConfig, res: GmmResult) -> tuple[np.ndarray, np.ndarray]:
    x_point = cfg.x_design_point()
    values = np.empty((len(LABELS), len(cfg.p_grid)))
    errors = np.empty_like(values)
    for a, t in enumerate(LABELS):
        for b, p in enumerate(cfg.p_grid):
            values[a, b], errors[a, b] = mer(res, EffectQuery(t=t, x=x_point, p=p))
    return values, errors


def _run_rep(cfg: SimConfig, graph: Graph | None, dist: DistanceIndex | None,
             rep: int):
    rng = np.random.default_rng(
        np.random.SeedSequence(cfg.master_seed, spawn_key=(rep,))
    )
    if graph is None:
        g = rgg(cfg.n, cfg.kappa, rng)
        radius = int(math.floor(bandwidth(cfg.n, g.average_degree, cfg.hac)))
        di = bfs_layers(g, radius)
    else:
        g, di = graph, dist
    data = generate_dataset(g, cfg.true_params, rng)
    expected = _full_layout(cfg)
    try:
        res = two_step(
            g, data, hac_cfg=cfg.hac, dist=di,
            eq_tol=cfg.eq_tol, eq_max_iter=cfg.eq_max_iter,
        )
        if res.layout != expected:
            raise ConvergenceError(
                "replication produced a reduced layout (degenerate cell)"
            )
        lam_idx = res.layout.lam_index()
        basis = np.zeros((res.layout.size, 1))
        basis[lam_idx, 0] = 1.0
        lam_true = cfg.true_params.first.lam
        _, wald_p = wald_test(
            res, lambda b: np.array([b[lam_idx] - lam_true]), basis, 1
        )
        mer_values, mer_errors = _mer_grid(cfg, res)
        return rep, True, res.flat, res.std_err, mer_values, mer_errors, wald_p
    except (ConvergenceError, RankDeficiencyError) as exc:
        logger.debug("replication %d failed: %s", rep, exc)
        return rep, False, None, None, None, None, None


_WORKER_STATE: dict = {}


def _mc_init(cfg, graph, dist):
    _WORKER_STATE["args"] = (cfg, graph, dist)


def _mc_task(rep: int):
    cfg, graph, dist = _WORKER_STATE["args"]
    return _run_rep(cfg, graph, dist, rep)


def max_workers(reps: int) -> int:
    cap = os.environ.get("NETMEE_THREADS")
    workers = os.cpu_count() or 1
    if cap is not None:
        try:
            workers = max(1, int(cap))
        except ValueError:
            raise ValidationError(f"NETMEE_THREADS must be an integer, got {cap!r}")
    return max(1, min(workers, reps))


def run_mc(cfg: SimConfig) -> McSummary:
    """Run the experiment and aggregate bias, SD, RMSE, coverage, and Wald size.

    Identical configs give identical summaries regardless of worker count:
    per-rep state is private and the reduction runs in replication order.
    Failures above 1% of replications log a warning; above 5% the experiment
    aborts.
    """
    graph = dist = None
    if cfg.topology == "ring":
        graph = ring(cfg.n)
        radius = int(math.floor(bandwidth(cfg.n, graph.average_degree, cfg.hac)))
        dist = bfs_layers(graph, radius)

    workers = max_workers(cfg.reps)
    if workers == 1:
        outcomes = [_run_rep(cfg, graph, dist, rep) for rep in range(cfg.reps)]
    else:
        chunk = max(1, cfg.reps // (workers * 8))
        with multiprocessing.Pool(
            processes=workers, initializer=_mc_init, initargs=(cfg, graph, dist)
        ) as pool:
            outcomes = pool.map(_mc_task, range(cfg.reps), chunksize=chunk)
    outcomes.sort(key=lambda item: item[0])

    ok = [o for o in outcomes if o[1]]
    failures = cfg.reps - len(ok)
    if failures > FAILURE_ABORT_FRACTION * cfg.reps:
        raise ConvergenceError(
            f"experiment aborted: {failures}/{cfg.reps} replications failed"
        )
    if failures > FAILURE_WARN_FRACTION * cfg.reps:
        logger.warning(
            "%d of %d replications failed and were excluded", failures, cfg.reps
        )
    if not ok:
        raise ConvergenceError("no replication converged")

    layout = _full_layout(cfg)
    truth_flat = layout.pack(cfg.true_params)
    estimates = np.stack([o[2] for o in ok])
    std_errs = np.stack([o[3] for o in ok])
    mer_values = np.stack([o[4] for o in ok])
    mer_errors = np.stack([o[5] for o in ok])
    wald_ps = np.array([o[6] for o in ok])
    used = len(ok)
    z = norm.ppf(0.5 + cfg.level / 2.0)
    alpha = 1.0 - cfg.level

    def metrics(values: np.ndarray, errors: np.ndarray, true_value: float):
        bias = float(values.mean() - true_value)
        sd = float(values.std(ddof=1)) if used >= 2 else None
        rmse = float(np.sqrt(np.mean((values - true_value) ** 2)))
        coverage = float(np.mean(np.abs(values - true_value) <= z * errors))
        return bias, sd, rmse, coverage, float(errors.mean())

    param_rows = []
    lam_idx = layout.lam_index()
    for j, name in enumerate(layout.names):
        bias, sd, rmse, coverage, se_mean = metrics(
            estimates[:, j], std_errs[:, j], truth_flat[j]
        )
        reject = float(np.mean(wald_ps < alpha)) if j == lam_idx else None
        param_rows.append(
            MetricRow(
                kind="param", name=name, true_value=float(truth_flat[j]),
                bias=bias, sd=sd, rmse=rmse, coverage=coverage,
                wald_reject=reject, se_mean=se_mean, reps_used=used,
            )
        )

    mer_rows = []
    for a, t in enumerate(LABELS):
        for b, p in enumerate(cfg.p_grid):
            true_value = _true_mer(cfg, t, p)
            bias, sd, rmse, coverage, se_mean = metrics(
                mer_values[:, a, b], mer_errors[:, a, b], true_value
            )
            mer_rows.append(
                MetricRow(
                    kind="mer", name=f"mer_{t.own}{t.neigh}", true_value=true_value,
                    bias=bias, sd=sd, rmse=rmse, coverage=coverage,
                    p=float(p), se_mean=se_mean, reps_used=used,
                )
            )

    return McSummary(config=cfg, reps=cfg.reps, failures=failures,
                     params=param_rows, mers=mer_rows)


def write_mc_summary_csv(path, summary: McSummary) -> None:
    """One row per parameter and per response cell/grid point."""
    import csv

    columns = ["kind", "name", "p", "true_value", "bias", "sd", "rmse",
               "coverage", "wald_reject", "se_mean", "reps_used"]

    def fmt(value):
        if value is None:
            return ""
        return repr(float(value))

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in summary.rows:
            writer.writerow([
                row.kind, row.name, fmt(row.p), fmt(row.true_value), fmt(row.bias),
                fmt(row.sd), fmt(row.rmse), fmt(row.coverage), fmt(row.wald_reject),
                fmt(row.se_mean), row.reps_used,
            ])
