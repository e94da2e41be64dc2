"""Per-node estimation sample: outcome, treatment, covariates, instruments."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

__all__ = ["Dataset", "write_nodes_csv"]


@dataclass
class Dataset:
    """Observed node-level data plus the derived exposure labels.

    ``x`` and ``z`` hold raw covariates and instruments (no intercept);
    ``x_design`` / ``z_design`` prepend the constant column.
    """

    y: np.ndarray
    d: np.ndarray
    x: np.ndarray
    z: np.ndarray
    labels: np.ndarray
    _x_design: np.ndarray = field(init=False, repr=False, default=None)
    _z_design: np.ndarray = field(init=False, repr=False, default=None)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        n = self.y.shape[0]
        self.d = np.asarray(self.d).ravel()
        self.x = np.asarray(self.x, dtype=float).reshape(n, -1)
        self.z = np.asarray(self.z, dtype=float).reshape(n, -1)
        self.labels = np.asarray(self.labels, dtype=np.int8).reshape(n, 2)
        if self.d.shape[0] != n:
            raise ValidationError("y and d must have equal length")
        if not np.isin(self.d, (0, 1)).all():
            raise ValidationError("treatment entries must be 0 or 1")
        self.d = self.d.astype(np.int8)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def dim_x(self) -> int:
        return self.x.shape[1]

    @property
    def dim_z(self) -> int:
        return self.z.shape[1]

    @property
    def x_design(self) -> np.ndarray:
        if self._x_design is None:
            self._x_design = np.column_stack([np.ones(self.n), self.x])
        return self._x_design

    @property
    def z_design(self) -> np.ndarray:
        if self._z_design is None:
            self._z_design = np.column_stack([np.ones(self.n), self.z])
        return self._z_design


def write_nodes_csv(path, data: Dataset, ids=None) -> None:
    """Write the node table with header ``id,y,d,x1..xk,z1..zm``.

    Floats are emitted with shortest round-trip formatting so reading the file
    back reproduces the numeric columns bit for bit.
    """
    header = (
        ["id", "y", "d"]
        + [f"x{j + 1}" for j in range(data.dim_x)]
        + [f"z{j + 1}" for j in range(data.dim_z)]
    )
    if ids is None:
        ids = range(data.n)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, node_id in zip(range(data.n), ids):
            row = [node_id, repr(float(data.y[i])), int(data.d[i])]
            row += [repr(float(v)) for v in data.x[i]]
            row += [repr(float(v)) for v in data.z[i]]
            writer.writerow(row)
