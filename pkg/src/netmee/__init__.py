"""Heterogeneous marginal exposure effects of an endogenous network treatment.

The pipeline: solve the equilibrium propensity fixed point, stack likelihood
scores with per-exposure-cell least-squares moments into a just-identified
GMM system, weight with a Parzen-kernel network HAC matrix, and report
plug-in marginal exposure responses/effects with sandwich standard errors.
A Monte Carlo harness benchmarks bias, dispersion, and coverage on ring and
random-geometric-graph designs.
"""

from .data import Dataset, write_nodes_csv
from .effects import EffectQuery, mee, mer, mer_table, write_mer_csv
from .equilibrium import (
    EquilibriumState,
    FirstStageParams,
    logistic,
    propensity_jacobian,
    solve_equilibrium,
)
from .errors import (
    AbsentCellError,
    ConvergenceError,
    NetmeeError,
    RankDeficiencyError,
    ValidationError,
)
from .exposure import LABELS, ExposureLabel, cell_counts, exposure_map
from .gmm import (
    GmmResult,
    confidence_interval,
    load_estimates_artifact,
    sequential_estimate,
    solve_step1,
    solve_step2,
    two_step,
    wald_test,
    write_covariance_csv,
    write_estimates_csv,
)
from .graph import (
    DistanceIndex,
    Graph,
    bfs_layers,
    neighbor_share,
    read_edge_csv,
    rgg,
    ring,
    write_edge_csv,
)
from .hac import HacConfig, bandwidth, hac_covariance, parzen, psd_repair
from .harness import (
    McSummary,
    SimConfig,
    default_true_params,
    generate_dataset,
    run_mc,
    write_mc_summary_csv,
)
from .moments import (
    CellParams,
    MomentEvaluation,
    MomentProblem,
    ParamLayout,
    ParamVector,
    first_stage_scores,
    second_stage_rows,
    stack,
)

__version__ = "0.1.0"

__all__ = [
    "AbsentCellError",
    "CellParams",
    "ConvergenceError",
    "Dataset",
    "DistanceIndex",
    "EffectQuery",
    "EquilibriumState",
    "ExposureLabel",
    "FirstStageParams",
    "GmmResult",
    "Graph",
    "HacConfig",
    "LABELS",
    "McSummary",
    "MomentEvaluation",
    "MomentProblem",
    "NetmeeError",
    "ParamLayout",
    "ParamVector",
    "RankDeficiencyError",
    "SimConfig",
    "ValidationError",
    "bandwidth",
    "bfs_layers",
    "cell_counts",
    "confidence_interval",
    "default_true_params",
    "exposure_map",
    "first_stage_scores",
    "generate_dataset",
    "hac_covariance",
    "load_estimates_artifact",
    "logistic",
    "mee",
    "mer",
    "mer_table",
    "neighbor_share",
    "parzen",
    "propensity_jacobian",
    "psd_repair",
    "read_edge_csv",
    "rgg",
    "ring",
    "run_mc",
    "second_stage_rows",
    "sequential_estimate",
    "solve_equilibrium",
    "solve_step1",
    "solve_step2",
    "stack",
    "two_step",
    "wald_test",
    "write_covariance_csv",
    "write_edge_csv",
    "write_estimates_csv",
    "write_mc_summary_csv",
    "write_mer_csv",
    "write_nodes_csv",
]
