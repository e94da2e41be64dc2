"""Undirected network representation, simulation topologies, and distance queries.

Graphs are immutable once built: edges are stored once per unordered pair and
adjacency is kept both raw and row-normalized (each row divided by the node's
degree, zero rows for isolated nodes). All peer averages in the model use the
row-normalized form.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.spatial import cKDTree

from .errors import ValidationError

__all__ = [
    "Graph",
    "DistanceIndex",
    "ring",
    "rgg",
    "bfs_layers",
    "neighbor_share",
    "read_edge_csv",
    "write_edge_csv",
]


@dataclass(frozen=True)
class Graph:
    """Simple undirected graph on nodes 0..n-1 with no self-loops.

    Attributes
    ----------
    n : int
        Node count.
    edges : ndarray of shape (m, 2)
        Unordered pairs stored once, each row sorted, rows lexicographic.
    degree : ndarray of shape (n,)
        Number of incident edges per node.
    adjacency : csr_matrix
        Symmetric 0/1 matrix with zero diagonal.
    row_normalized : csr_matrix
        Adjacency with row i divided by degree[i]; rows of isolated nodes
        are identically zero, so peer averages of those nodes are 0.
    """

    n: int
    edges: np.ndarray
    degree: np.ndarray
    adjacency: sparse.csr_matrix = field(repr=False)
    row_normalized: sparse.csr_matrix = field(repr=False)

    @property
    def edge_count(self) -> int:
        return self.edges.shape[0]

    @property
    def average_degree(self) -> float:
        return float(self.degree.mean()) if self.n else 0.0

    def neighbors(self, i: int) -> np.ndarray:
        a = self.adjacency
        return a.indices[a.indptr[i]:a.indptr[i + 1]]

    @staticmethod
    def from_edges(n: int, pairs: np.ndarray | list) -> "Graph":
        """Build a graph from an iterable of (i, j) pairs.

        Duplicate and reversed pairs are merged. Self-loops and out-of-range
        endpoints are rejected.
        """
        if n < 0:
            raise ValidationError("node count must be non-negative")
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if pairs.size:
            if pairs.min() < 0 or pairs.max() >= n:
                raise ValidationError(
                    f"edge endpoint out of range for n={n}: "
                    f"min={pairs.min()}, max={pairs.max()}"
                )
            if np.any(pairs[:, 0] == pairs[:, 1]):
                bad = int(np.flatnonzero(pairs[:, 0] == pairs[:, 1])[0])
                raise ValidationError(f"self-loop on node {pairs[bad, 0]} is not allowed")
            pairs = np.sort(pairs, axis=1)
            pairs = np.unique(pairs, axis=0)
        edges = pairs
        edges.setflags(write=False)
        if edges.size:
            i, j = edges[:, 0], edges[:, 1]
            data = np.ones(2 * edges.shape[0])
            adj = sparse.coo_matrix(
                (data, (np.concatenate([i, j]), np.concatenate([j, i]))),
                shape=(n, n),
            ).tocsr()
        else:
            adj = sparse.csr_matrix((n, n))
        degree = np.asarray(adj.sum(axis=1)).ravel().astype(np.int64)
        degree.setflags(write=False)
        inv = np.zeros(n)
        nz = degree > 0
        inv[nz] = 1.0 / degree[nz]
        tilde = sparse.diags(inv) @ adj
        return Graph(n=n, edges=edges, degree=degree, adjacency=adj,
                     row_normalized=tilde.tocsr())


def ring(n: int) -> Graph:
    """Cycle graph: node i adjacent to (i-1) mod n and (i+1) mod n."""
    if n < 3:
        raise ValidationError(f"ring requires n >= 3, got {n}")
    idx = np.arange(n, dtype=np.int64)
    pairs = np.column_stack([idx, (idx + 1) % n])
    return Graph.from_edges(n, pairs)


def rgg(n: int, kappa: float, rng: np.random.Generator) -> Graph:
    """Random geometric graph on the unit square.

    Positions are i.i.d. uniform on [0,1]^2 and nodes i, j are connected when
    their Euclidean distance is at most ``sqrt(kappa / (pi * n))``, which makes
    ``kappa`` the expected degree away from the square's boundary. The draw is
    deterministic given the generator state.
    """
    if n < 2:
        raise ValidationError(f"rgg requires n >= 2, got {n}")
    if kappa <= 0:
        raise ValidationError(f"rgg requires kappa > 0, got {kappa}")
    positions = rng.random((n, 2))
    radius = np.sqrt(kappa / (np.pi * n))
    pairs = cKDTree(positions).query_pairs(radius, output_type="ndarray")
    return Graph.from_edges(n, pairs)


@dataclass(frozen=True)
class DistanceIndex:
    """Exact BFS distance layers per node, up to a fixed radius.

    ``layer(i, s)`` is the set of nodes at path distance exactly s from i;
    ``pairs(s)`` is the symmetric 0/1 matrix of all such (i, j) pairs.
    Nodes unreachable within the radius appear in no layer.
    """

    n: int
    radius: int
    _layers: dict[int, sparse.csr_matrix] = field(repr=False)

    def layer(self, i: int, s: int) -> np.ndarray:
        if s == 0:
            return np.array([i], dtype=np.int64)
        mat = self._layers.get(s)
        if mat is None:
            return np.array([], dtype=np.int64)
        return mat.indices[mat.indptr[i]:mat.indptr[i + 1]].astype(np.int64)

    def pairs(self, s: int) -> sparse.csr_matrix:
        if s == 0:
            return sparse.identity(self.n, format="csr")
        mat = self._layers.get(s)
        if mat is None:
            return sparse.csr_matrix((self.n, self.n))
        return mat


def bfs_layers(g: Graph, radius: int) -> DistanceIndex:
    """Compute exact-distance BFS layers for every node up to ``radius``.

    Sources are processed in blocks through the compiled shortest-path kernel,
    so the result does not depend on traversal order.
    """
    if radius < 0:
        raise ValidationError(f"radius must be >= 0, got {radius}")
    layers: dict[int, sparse.csr_matrix] = {}
    if radius >= 1 and g.edge_count > 0:
        per_s_rows: dict[int, list[np.ndarray]] = {}
        per_s_cols: dict[int, list[np.ndarray]] = {}
        block = max(1, min(g.n, 4_000_000 // max(g.n, 1)))
        for start in range(0, g.n, block):
            sources = np.arange(start, min(start + block, g.n))
            dist = csgraph.dijkstra(
                g.adjacency, unweighted=True, limit=radius, indices=sources
            )
            for s in range(1, radius + 1):
                ii, jj = np.nonzero(dist == s)
                if ii.size:
                    per_s_rows.setdefault(s, []).append(sources[ii])
                    per_s_cols.setdefault(s, []).append(jj)
        for s, row_chunks in per_s_rows.items():
            rows = np.concatenate(row_chunks)
            cols = np.concatenate(per_s_cols[s])
            layers[s] = sparse.coo_matrix(
                (np.ones(rows.size), (rows, cols)), shape=(g.n, g.n)
            ).tocsr()
    return DistanceIndex(n=g.n, radius=radius, _layers=layers)


def neighbor_share(g: Graph, values: np.ndarray, i: int) -> float:
    """Average of ``values`` over the neighbors of node i; 0 when i is isolated."""
    values = np.asarray(values, dtype=float)
    if values.shape != (g.n,):
        raise ValidationError(
            f"values must have length {g.n}, got shape {values.shape}"
        )
    if g.degree[i] == 0:
        return 0.0
    return float(values[g.neighbors(i)].mean())


def read_edge_csv(path, id_to_index: dict | None = None,
                  n: int | None = None) -> Graph:
    """Read an undirected edge list with header ``src,dst``.

    Endpoints are either zero-based integers or, when ``id_to_index`` is
    given, arbitrary ids remapped through it. Duplicate and reversed rows are
    merged; a self-loop or unknown endpoint aborts with the offending line
    number (header is line 1).
    """
    pairs = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["src", "dst"]:
            raise ValidationError(f"{path}: expected header 'src,dst', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) < 2:
                raise ValidationError(f"{path}: line {lineno}: expected two columns")
            a, b = row[0].strip(), row[1].strip()
            if id_to_index is not None:
                if a not in id_to_index:
                    raise ValidationError(f"{path}: line {lineno}: unknown node id {a!r}")
                if b not in id_to_index:
                    raise ValidationError(f"{path}: line {lineno}: unknown node id {b!r}")
                u, v = id_to_index[a], id_to_index[b]
            else:
                try:
                    u, v = int(a), int(b)
                except ValueError as exc:
                    raise ValidationError(
                        f"{path}: line {lineno}: non-integer endpoint {a!r},{b!r}"
                    ) from exc
                if u < 0 or v < 0:
                    raise ValidationError(f"{path}: line {lineno}: negative node id")
            if u == v:
                raise ValidationError(f"{path}: line {lineno}: self-loop on node {a!r}")
            pairs.append((u, v))
    if n is None:
        if id_to_index is not None:
            n = len(id_to_index)
        else:
            n = 1 + max((max(p) for p in pairs), default=-1)
    return Graph.from_edges(n, np.array(pairs, dtype=np.int64).reshape(-1, 2))


def write_edge_csv(path, g: Graph) -> None:
    """Write the canonical deduplicated edge list with header ``src,dst``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["src", "dst"])
        for u, v in g.edges:
            writer.writerow([int(u), int(v)])
