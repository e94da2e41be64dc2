"""Plug-in marginal exposure responses and effects with delta-method inference.

The response at label t, covariate point x (intercept included), and
heterogeneity quantile p is linear in the estimates,

    x' beta_x(t) + p * beta_p(t),

so its gradient in the flat parameter vector is exact: x in that label's
coefficient slots, p in its heterogeneity slot, zeros elsewhere. Standard
errors are the quadratic form of that gradient in the scaled covariance.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .errors import AbsentCellError, ValidationError
from .exposure import ExposureLabel
from .gmm import GmmResult

__all__ = ["EffectQuery", "mer", "mee", "mer_table", "write_mer_csv"]

DEFAULT_P_GRID = (0.2, 0.5, 0.8)


@dataclass(frozen=True)
class EffectQuery:
    """Evaluation point: exposure label, covariate vector with intercept, quantile."""

    t: ExposureLabel
    x: np.ndarray
    p: float

    def __post_init__(self):
        object.__setattr__(self, "t", ExposureLabel(*self.t))
        object.__setattr__(self, "x", np.atleast_1d(np.asarray(self.x, dtype=float)))
        object.__setattr__(self, "p", float(self.p))
        if not 0.0 < self.p < 1.0:
            raise ValidationError(f"quantile must lie in (0, 1), got {self.p}")


def _gradient(res: GmmResult, t: ExposureLabel, x: np.ndarray, p: float) -> np.ndarray:
    layout = res.layout
    if t not in layout.labels:
        raise AbsentCellError(
            f"exposure label ({t.own},{t.neigh}) was not estimated "
            "(too few observations in that cell)"
        )
    if x.shape != (layout.dim_x + 1,):
        raise ValidationError(
            f"covariate point must have length {layout.dim_x + 1} "
            f"(intercept included), got {x.shape}"
        )
    grad = np.zeros(layout.size)
    block = layout.cell_slice(t)
    grad[block.start:block.stop - 1] = x
    grad[block.stop - 1] = p
    return grad


def mer(res: GmmResult, query: EffectQuery) -> tuple[float, float]:
    """Marginal exposure response and its delta-method standard error."""
    grad = _gradient(res, query.t, query.x, query.p)
    value = float(grad @ res.flat)
    variance = float(grad @ res.scaled_covariance() @ grad)
    return value, float(np.sqrt(max(variance, 0.0)))


def mee(
    res: GmmResult,
    t_from,
    t_to,
    x,
    p: float,
) -> tuple[float, float]:
    """Response difference from ``t_from`` to ``t_to`` at the same (x, p)."""
    query_to = EffectQuery(t=ExposureLabel(*t_to), x=x, p=p)
    query_from = EffectQuery(t=ExposureLabel(*t_from), x=x, p=p)
    grad = _gradient(res, query_to.t, query_to.x, query_to.p) - _gradient(
        res, query_from.t, query_from.x, query_from.p
    )
    value = float(grad @ res.flat)
    variance = float(grad @ res.scaled_covariance() @ grad)
    return value, float(np.sqrt(max(variance, 0.0)))


def mer_table(
    res: GmmResult,
    x,
    p_grid=DEFAULT_P_GRID,
    level: float = 0.95,
) -> list[dict]:
    """Responses over every estimated label and quantile grid point, with CIs."""
    z = norm.ppf(0.5 + level / 2.0)
    out = []
    for t in res.layout.labels:
        for p in p_grid:
            value, se = mer(res, EffectQuery(t=t, x=x, p=p))
            out.append(
                {
                    "t_own": t.own,
                    "t_neigh": t.neigh,
                    "p": float(p),
                    "estimate": value,
                    "std_error": se,
                    "ci_lower": value - z * se,
                    "ci_upper": value + z * se,
                }
            )
    return out


def write_mer_csv(path, rows: list[dict]) -> None:
    """Emit t_own,t_neigh,p,estimate,std_error,ci_lower,ci_upper rows."""
    columns = ["t_own", "t_neigh", "p", "estimate", "std_error", "ci_lower", "ci_upper"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow(
                [row["t_own"], row["t_neigh"], repr(float(row["p"]))]
                + [repr(float(row[c])) for c in columns[3:]]
            )
