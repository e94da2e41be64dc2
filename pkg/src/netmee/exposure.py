"""Exposure mapping: own treatment and the any-treated-neighbor indicator."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import ValidationError
from .graph import Graph

__all__ = [
    "ExposureLabel",
    "LABELS",
    "exposure_map",
    "cell_counts",
    "required_cell_count",
    "active_labels",
]


class ExposureLabel(NamedTuple):
    """Label (own, neigh) with both components in {0, 1}."""

    own: int
    neigh: int


LABELS: tuple[ExposureLabel, ...] = (
    ExposureLabel(0, 0),
    ExposureLabel(1, 0),
    ExposureLabel(0, 1),
    ExposureLabel(1, 1),
)
"""Canonical label order used by the flat parameter layout."""


def exposure_map(g: Graph, d: np.ndarray) -> np.ndarray:
    """Label every node with (own treatment, 1{any treated neighbor}).

    Returns an (n, 2) int8 array. Isolated nodes always get neigh = 0.
    """
    d = np.asarray(d)
    if d.shape != (g.n,):
        raise ValidationError(f"treatment vector must have length {g.n}, got {d.shape}")
    if not np.isin(d, (0, 1)).all():
        raise ValidationError("treatment entries must be 0 or 1")
    d = d.astype(np.int8)
    treated_neighbors = np.asarray(g.adjacency @ d.astype(float))
    labels = np.empty((g.n, 2), dtype=np.int8)
    labels[:, 0] = d
    labels[:, 1] = treated_neighbors > 0
    return labels


def cell_counts(labels: np.ndarray) -> dict[ExposureLabel, int]:
    """Number of nodes carrying each of the four labels."""
    counts = {}
    for t in LABELS:
        counts[t] = int(np.sum((labels[:, 0] == t.own) & (labels[:, 1] == t.neigh)))
    return counts


def required_cell_count(dim_x: int) -> int:
    """Minimum observations per label for a non-singular within-cell fit."""
    return dim_x + 2


def active_labels(labels: np.ndarray, dim_x: int) -> tuple[ExposureLabel, ...]:
    """Labels with enough observations to estimate; others are reported absent."""
    counts = cell_counts(labels)
    need = required_cell_count(dim_x)
    return tuple(t for t in LABELS if counts[t] >= need)
