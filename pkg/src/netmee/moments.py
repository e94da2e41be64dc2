"""Stacked just-identified moment system.

The moment vector combines the first-stage likelihood scores for
``(beta_d, lam)`` with, for every estimable exposure label, the least-squares
orthogonality conditions of the outcome on the within-cell design
``(x, m)``, where the generated regressor m imputes the conditional mean of
the uniform selection heterogeneity:

    m_i = p_i / 2        when the label's own-treatment component is 1,
    m_i = (1 + p_i) / 2  when it is 0.

The flat parameter order is ``[beta_d..., lam, (beta_x, beta_p) per label]``
with labels ordered (0,0), (1,0), (0,1), (1,1). Structurally unidentified
pieces are dropped from the layout: ``lam`` when the graph has no edges, and
any label with fewer than dim(x) + 2 observations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .equilibrium import EquilibriumState, FirstStageParams, solve_equilibrium
from .errors import ValidationError
from .exposure import LABELS, ExposureLabel, active_labels
from .graph import Graph

__all__ = [
    "CellParams",
    "ParamVector",
    "ParamLayout",
    "MomentEvaluation",
    "first_stage_scores",
    "second_stage_rows",
    "stack",
    "MomentProblem",
    "conditional_mean_v",
]


@dataclass(frozen=True)
class CellParams:
    """Outcome coefficients for one exposure label: x part and heterogeneity slope."""

    beta_x: np.ndarray
    beta_p: float

    def __post_init__(self):
        beta = np.array(self.beta_x, dtype=float, copy=True).reshape(-1)
        beta.setflags(write=False)
        object.__setattr__(self, "beta_x", beta)
        object.__setattr__(self, "beta_p", float(self.beta_p))


@dataclass(frozen=True)
class ParamVector:
    """Structured parameter block: first stage plus per-label outcome cells."""

    first: FirstStageParams
    cells: dict[ExposureLabel, CellParams]

    def cell(self, t) -> CellParams:
        return self.cells[ExposureLabel(*t)]


@dataclass(frozen=True)
class ParamLayout:
    """Fixed mapping between the structured parameters and the flat vector."""

    dim_z: int
    dim_x: int
    lambda_active: bool = True
    labels: tuple[ExposureLabel, ...] = LABELS

    @property
    def first_stage_size(self) -> int:
        return self.dim_z + 1 + int(self.lambda_active)

    @property
    def cell_size(self) -> int:
        return self.dim_x + 2

    @property
    def size(self) -> int:
        return self.first_stage_size + len(self.labels) * self.cell_size

    @property
    def names(self) -> list[str]:
        out = [f"beta_D{k}" for k in range(self.dim_z + 1)]
        if self.lambda_active:
            out.append("lambda")
        for t in self.labels:
            out += [f"beta_X{k}_{t.own}{t.neigh}" for k in range(self.dim_x + 1)]
            out.append(f"beta_p_{t.own}{t.neigh}")
        return out

    def lam_index(self) -> int | None:
        return self.dim_z + 1 if self.lambda_active else None

    def cell_slice(self, t) -> slice:
        t = ExposureLabel(*t)
        pos = self.labels.index(t)
        start = self.first_stage_size + pos * self.cell_size
        return slice(start, start + self.cell_size)

    def pack(self, pv: ParamVector) -> np.ndarray:
        parts = [pv.first.beta_d]
        if self.lambda_active:
            parts.append([pv.first.lam])
        for t in self.labels:
            cell = pv.cells[t]
            parts.append(cell.beta_x)
            parts.append([cell.beta_p])
        flat = np.concatenate([np.asarray(p, dtype=float).ravel() for p in parts])
        if flat.shape[0] != self.size:
            raise ValidationError(
                f"parameter vector has {flat.shape[0]} entries, layout needs {self.size}"
            )
        return flat

    def unpack(self, flat: np.ndarray) -> ParamVector:
        flat = np.asarray(flat, dtype=float).ravel()
        if flat.shape[0] != self.size:
            raise ValidationError(
                f"flat vector has {flat.shape[0]} entries, layout needs {self.size}"
            )
        k = self.dim_z + 1
        beta_d = flat[:k]
        lam = flat[k] if self.lambda_active else 0.0
        cells = {}
        for t in self.labels:
            block = flat[self.cell_slice(t)]
            cells[t] = CellParams(beta_x=block[:-1], beta_p=block[-1])
        return ParamVector(first=FirstStageParams(beta_d=beta_d, lam=lam), cells=cells)

    @staticmethod
    def for_sample(g: Graph, data: Dataset) -> "ParamLayout":
        """Layout implied by the sample: drop structurally unidentified pieces.

        With no edges the spillover moment is identically zero, so ``lam`` is
        pinned at 0 and excluded; labels below the per-cell observation floor
        are likewise excluded and later reported as absent.
        """
        return ParamLayout(
            dim_z=data.dim_z,
            dim_x=data.dim_x,
            lambda_active=g.edge_count > 0,
            labels=active_labels(data.labels, data.dim_x),
        )


@dataclass(frozen=True)
class MomentEvaluation:
    """Per-node moment rows, their mean, and the equilibrium they used."""

    rows: np.ndarray
    mean: np.ndarray
    state: EquilibriumState = field(repr=False, default=None)


def conditional_mean_v(p: np.ndarray, own: int) -> np.ndarray:
    """Mean of the uniform heterogeneity given selection at propensity ``p``."""
    p = np.asarray(p, dtype=float)
    return 0.5 * p if own == 1 else 0.5 * (1.0 + p)


def first_stage_scores(
    state: EquilibriumState,
    g: Graph,
    z_design: np.ndarray,
    d: np.ndarray,
    params: FirstStageParams,
) -> np.ndarray:
    """Likelihood score rows for (beta_d, lam), one row per node.

    The coefficient scores are ``(d_i - p_i)(z_ik + lam * avg_j dp_j/dbeta_k)``
    and the spillover score replaces the design column with the neighbor
    average of p; averages run over the row-normalized adjacency.
    """
    if state.dp_dbeta is None or state.dp_dlam is None:
        raise ValidationError("equilibrium state lacks derivatives")
    resid = np.asarray(d, dtype=float) - state.p
    tilde = g.row_normalized
    beta_cols = z_design + params.lam * np.asarray(tilde @ state.dp_dbeta)
    lam_col = state.shares + params.lam * np.asarray(tilde @ state.dp_dlam)
    return resid[:, None] * np.column_stack([beta_cols, lam_col])


def second_stage_rows(
    t,
    y: np.ndarray,
    x_design: np.ndarray,
    labels: np.ndarray,
    p: np.ndarray,
    beta_x: np.ndarray,
    beta_p: float,
) -> np.ndarray:
    """Within-cell least-squares moment rows for one exposure label.

    Rows are ``1{T_i = t} * 2 * (x_i, m_i) * residual_i`` with residual
    ``y_i - x_i' beta_x - m_i beta_p``. Nodes outside the cell contribute
    zero rows.
    """
    t = ExposureLabel(*t)
    m = conditional_mean_v(p, t.own)
    resid = y - x_design @ np.asarray(beta_x, dtype=float) - m * float(beta_p)
    in_cell = (labels[:, 0] == t.own) & (labels[:, 1] == t.neigh)
    r = np.where(in_cell, resid, 0.0)
    return np.column_stack([2.0 * x_design * r[:, None], 2.0 * m * r])


def stack(
    first_rows: np.ndarray,
    cell_rows: dict[ExposureLabel, np.ndarray],
    layout: ParamLayout,
    state: EquilibriumState | None = None,
) -> MomentEvaluation:
    """Concatenate the first-stage and per-label blocks in flat-layout order."""
    if first_rows.shape[1] != layout.dim_z + 2:
        raise ValidationError(
            f"first-stage rows have {first_rows.shape[1]} columns, "
            f"expected {layout.dim_z + 2}"
        )
    blocks = [first_rows if layout.lambda_active else first_rows[:, :-1]]
    for t in layout.labels:
        rows = cell_rows[t]
        if rows.shape[1] != layout.cell_size:
            raise ValidationError(
                f"cell {tuple(t)} rows have {rows.shape[1]} columns, "
                f"expected {layout.cell_size}"
            )
        blocks.append(rows)
    rows = np.hstack(blocks)
    if rows.shape[1] != layout.size:
        raise ValidationError(
            f"stacked rows have {rows.shape[1]} columns, layout needs {layout.size}"
        )
    return MomentEvaluation(rows=rows, mean=rows.mean(axis=0), state=state)


class MomentProblem:
    """Moment system bound to one sample; caches equilibria across evaluations.

    Evaluating the moments at a new ``(beta_d, lam)`` re-solves the propensity
    fixed point (nested fixed point); perturbing only outcome-cell parameters
    reuses the cached equilibrium, which keeps finite-difference Jacobians
    cheap. The equilibrium is solved tighter than its standalone default so
    that difference quotients are not polluted by fixed-point error.
    """

    def __init__(
        self,
        g: Graph,
        data: Dataset,
        layout: ParamLayout | None = None,
        eq_tol: float = 1e-13,
        eq_max_iter: int = 10_000,
        jacobian_method: str = "auto",
    ):
        if data.n != g.n:
            raise ValidationError(
                f"dataset has {data.n} rows but graph has {g.n} nodes"
            )
        self.graph = g
        self.data = data
        self.layout = layout if layout is not None else ParamLayout.for_sample(g, data)
        if not self.layout.labels:
            raise ValidationError("no exposure label has enough observations")
        self.eq_tol = eq_tol
        self.eq_max_iter = eq_max_iter
        self.jacobian_method = jacobian_method
        self._cache: dict[bytes, EquilibriumState] = {}
        self._cache_order: list[bytes] = []

    def equilibrium(self, first: FirstStageParams) -> EquilibriumState:
        key = np.concatenate([first.beta_d, [first.lam]]).tobytes()
        state = self._cache.get(key)
        if state is None:
            warm = None
            if self._cache_order:
                warm = self._cache[self._cache_order[-1]].p
            state = solve_equilibrium(
                self.graph,
                self.data.z_design,
                first,
                tol=self.eq_tol,
                max_iter=self.eq_max_iter,
                derivatives=True,
                p0=warm,
                jacobian_method=self.jacobian_method,
            )
            self._cache[key] = state
            self._cache_order.append(key)
            if len(self._cache_order) > 8:
                self._cache.pop(self._cache_order.pop(0))
        return state

    def evaluate(self, pv: ParamVector) -> MomentEvaluation:
        state = self.equilibrium(pv.first)
        first_rows = first_stage_scores(
            state, self.graph, self.data.z_design, self.data.d, pv.first
        )
        cell_rows = {
            t: second_stage_rows(
                t,
                self.data.y,
                self.data.x_design,
                self.data.labels,
                state.p,
                pv.cells[t].beta_x,
                pv.cells[t].beta_p,
            )
            for t in self.layout.labels
        }
        return stack(first_rows, cell_rows, self.layout, state=state)

    def gbar(self, flat: np.ndarray) -> np.ndarray:
        return self.evaluate(self.layout.unpack(flat)).mean

    def jacobian_fd(self, flat: np.ndarray, step_scale: float = 1e-6) -> np.ndarray:
        """Central-difference Jacobian of the mean moments, d x d.

        Step size per coordinate is ``step_scale * max(1, |beta_j|)``; the
        equilibrium is re-solved whenever a first-stage coordinate moves.
        """
        flat = np.asarray(flat, dtype=float)
        d = self.layout.size
        jac = np.empty((d, d))
        for j in range(d):
            h = step_scale * max(1.0, abs(flat[j]))
            up = flat.copy()
            up[j] += h
            down = flat.copy()
            down[j] -= h
            jac[:, j] = (self.gbar(up) - self.gbar(down)) / (2.0 * h)
        return jac
