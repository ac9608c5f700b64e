"""Attributed graph data model, on-disk dataset format and structural metrics.

A dataset directory holds::

    edges.tsv     one undirected edge per line, two zero-based node ids
    features.csv  n lines of d comma-separated reals, no header
    labels.txt    optional, n lines with one non-negative integer each
    meta.json     optional, keys ``name``, ``n``, ``d``, ``num_classes``
"""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from gamm.errors import GraphError, GraphFormatError

logger = logging.getLogger(__name__)


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class AttributedGraph:
    """Simple undirected graph in CSR form with a dense feature matrix.

    Use :meth:`from_edges` to build one; the raw constructor expects an
    already canonical CSR structure and only validates it.
    """

    indptr: np.ndarray
    indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray | None = None
    name: str = "graph"
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        n = self.features.shape[0]
        if self.features.ndim != 2:
            raise GraphFormatError("features must be a 2-d matrix")
        if self.indptr.shape != (n + 1,):
            raise GraphFormatError(f"indptr has {self.indptr.size} entries, expected {n + 1}")
        if not np.all(np.isfinite(self.features)):
            raise GraphFormatError("features contain non-finite values")
        if self.labels is not None:
            if self.labels.shape != (n,):
                raise GraphFormatError(f"labels have {self.labels.size} entries, expected {n}")
            if self.labels.size and self.labels.min() < 0:
                raise GraphFormatError("labels must be non-negative integers")
        for arr in (self.indptr, self.indices, self.features, self.labels):
            if arr is not None:
                _frozen(arr)

    @classmethod
    def from_edges(
        cls,
        num_nodes: int,
        edges: np.ndarray | Iterable[Sequence[int]],
        features: np.ndarray | None = None,
        labels: np.ndarray | Sequence[int] | None = None,
        name: str = "graph",
        meta: dict | None = None,
    ) -> AttributedGraph:
        """Build a graph from an edge list.

        Reversed and repeated edges are merged and self-loops are dropped; the
        number of dropped self-loops is recorded in ``meta["self_loops_dropped"]``.
        ``features`` defaults to an ``n x 0`` matrix.
        """
        edges = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64)
        if edges.size == 0:
            edges = edges.reshape(0, 2)
        if edges.ndim != 2 or edges.shape[1] != 2:
            raise GraphFormatError("edges must be pairs of node ids")
        if edges.size and (edges.min() < 0 or edges.max() >= num_nodes):
            bad = edges[(edges < 0).any(axis=1) | (edges >= num_nodes).any(axis=1)][0]
            raise GraphFormatError(
                f"edge ({bad[0]}, {bad[1]}) references a node outside 0..{num_nodes - 1}"
            )
        loops = edges[:, 0] == edges[:, 1]
        n_loops = int(loops.sum())
        if n_loops:
            logger.warning("dropping %d self-loop(s)", n_loops)
        edges = np.sort(edges[~loops], axis=1)
        edges = np.unique(edges, axis=0) if edges.size else edges
        both = np.concatenate([edges, edges[:, ::-1]])
        order = np.lexsort((both[:, 1], both[:, 0]))
        both = both[order]
        indptr = np.zeros(num_nodes + 1, dtype=np.int64)
        np.cumsum(np.bincount(both[:, 0], minlength=num_nodes), out=indptr[1:])

        if features is None:
            features = np.zeros((num_nodes, 0))
        features = np.array(features, dtype=np.float64, copy=True)
        if features.ndim != 2 or features.shape[0] != num_nodes:
            raise GraphFormatError(
                f"features have {features.shape[0] if features.ndim else 0} rows, expected {num_nodes}"
            )
        if labels is not None:
            labels = np.array(labels, dtype=np.int64, copy=True)
        info = dict(meta or {})
        info["self_loops_dropped"] = n_loops
        return cls(
            indptr=indptr,
            indices=np.ascontiguousarray(both[:, 1]),
            features=features,
            labels=labels,
            name=name,
            meta=info,
        )

    @property
    def num_nodes(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_edges(self) -> int:
        return self.indices.size // 2

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbors(self, node: int) -> np.ndarray:
        self._check_node(node)
        return self.indices[self.indptr[node] : self.indptr[node + 1]]

    def edge_array(self) -> np.ndarray:
        """Return each undirected edge once as an ``(m, 2)`` array with ``i < j``, sorted."""
        rows = np.repeat(np.arange(self.num_nodes), self.degrees)
        keep = rows < self.indices
        return np.column_stack([rows[keep], self.indices[keep]])

    def adjacency(self) -> sp.csr_matrix:
        n = self.num_nodes
        data = np.ones(self.indices.size)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(n, n))

    def with_features(self, features: np.ndarray) -> AttributedGraph:
        """Copy of this graph carrying a different feature matrix."""
        return AttributedGraph(
            indptr=self.indptr,
            indices=self.indices,
            features=np.array(features, dtype=np.float64, copy=True),
            labels=self.labels,
            name=self.name,
            meta=dict(self.meta),
        )

    def _check_node(self, node: int) -> None:
        if not 0 <= node < self.num_nodes:
            raise GraphError(f"node {node} out of range 0..{self.num_nodes - 1}")


@dataclass(frozen=True)
class StructuralProfile:
    """Per-node structural properties; only degree is required downstream."""

    degree: np.ndarray
    log_degree: np.ndarray


@dataclass(frozen=True)
class ColumnSplit:
    """Partition of feature columns into always-observed and missable sets."""

    observed_columns: tuple[int, ...]
    missable_columns: tuple[int, ...]

    @classmethod
    def from_observed(cls, num_features: int, observed: Iterable[int] = ()) -> ColumnSplit:
        obs = sorted(set(int(c) for c in observed))
        if obs and (obs[0] < 0 or obs[-1] >= num_features):
            raise GraphError(f"observed column index out of range 0..{num_features - 1}")
        chosen = set(obs)
        return cls(tuple(obs), tuple(c for c in range(num_features) if c not in chosen))

    @property
    def num_features(self) -> int:
        return len(self.observed_columns) + len(self.missable_columns)


def structural_profile(g: AttributedGraph) -> StructuralProfile:
    deg = g.degrees.copy()
    return StructuralProfile(degree=_frozen(deg), log_degree=_frozen(np.log1p(deg.astype(np.float64))))


def k_hop_neighbors(g: AttributedGraph, node: int, h: int) -> set[int]:
    """Nodes at shortest-path distance 1..h from ``node`` (the node itself excluded)."""
    g._check_node(node)
    if h < 0:
        raise GraphError("hop count must be non-negative")
    seen = {node}
    frontier = deque([(node, 0)])
    while frontier:
        u, dist = frontier.popleft()
        if dist == h:
            continue
        for v in g.neighbors(u).tolist():
            if v not in seen:
                seen.add(v)
                frontier.append((v, dist + 1))
    seen.discard(node)
    return seen


def k_hop_matrix(g: AttributedGraph, h: int) -> sp.csr_matrix:
    """Binary ``n x n`` matrix whose row i marks the h-hop neighborhood of i."""
    n = g.num_nodes
    if h < 1:
        return sp.csr_matrix((n, n))
    adj = g.adjacency()
    if h == 1:
        return adj
    step = (adj + sp.identity(n, format="csr")).astype(bool)
    reach = step
    for _ in range(h - 1):
        reach = (reach @ step).astype(bool)
    reach = reach.tolil()
    reach.setdiag(False)
    reach = reach.tocsr()
    reach.eliminate_zeros()
    return reach.astype(np.float64)


def adjusted_homophily(g: AttributedGraph) -> float:
    """Degree-corrected edge homophily of the label assignment.

    ``(h_edge - sum_k p_k^2) / (1 - sum_k p_k^2)`` where ``h_edge`` is the
    fraction of edges joining same-label nodes and ``p_k`` the share of edge
    endpoints that belong to class k.
    """
    if g.labels is None:
        raise GraphError("adjusted homophily requires node labels")
    if g.num_edges == 0:
        raise GraphError("adjusted homophily is undefined on a graph without edges")
    y = g.labels
    if np.unique(y).size < 2:
        raise GraphError("adjusted homophily needs at least two classes")
    e = g.edge_array()
    h_edge = float(np.mean(y[e[:, 0]] == y[e[:, 1]]))
    p = np.bincount(y, weights=g.degrees.astype(np.float64)) / (2.0 * g.num_edges)
    expected = float(np.sum(p * p))
    if expected >= 1.0:
        raise GraphError("all edge endpoints share one class; adjusted homophily is undefined")
    return (h_edge - expected) / (1.0 - expected)


# --- dataset I/O ---------------------------------------------------------


def _read_edges(path: Path) -> np.ndarray:
    pairs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise GraphFormatError(f"{path}:{lineno}: expected two node ids, got {len(parts)} fields")
            try:
                pairs.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise GraphFormatError(f"{path}:{lineno}: node ids must be integers") from None
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


def _read_features(path: Path) -> np.ndarray:
    try:
        feats = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise GraphFormatError(f"{path}: {exc}") from None
    if not np.all(np.isfinite(feats)):
        raise GraphFormatError(f"{path}: non-finite feature value")
    return feats


def load_graph(dir_path: str | Path) -> AttributedGraph:
    """Load and validate a dataset directory."""
    root = Path(dir_path)
    edges_path, feats_path = root / "edges.tsv", root / "features.csv"
    for p in (edges_path, feats_path):
        if not p.is_file():
            raise GraphFormatError(f"missing dataset file {p}")
    features = _read_features(feats_path)
    n = features.shape[0]
    edges = _read_edges(edges_path)
    if edges.size and edges.max() >= n:
        raise GraphFormatError(
            f"edge endpoint {int(edges.max())} does not match the {n} rows of {feats_path.name}"
        )
    if edges.size and edges.min() < 0:
        raise GraphFormatError("negative node id in edges.tsv")

    labels = None
    labels_path = root / "labels.txt"
    if labels_path.is_file():
        try:
            labels = np.array([int(x) for x in labels_path.read_text().split()], dtype=np.int64)
        except ValueError:
            raise GraphFormatError(f"{labels_path}: labels must be integers") from None
        if labels.size != n:
            raise GraphFormatError(f"{labels_path}: {labels.size} labels for {n} nodes")

    meta = {}
    meta_path = root / "meta.json"
    if meta_path.is_file():
        meta = json.loads(meta_path.read_text())
        _check_meta(meta, n, features.shape[1], labels)
    name = str(meta.get("name", root.name))
    return AttributedGraph.from_edges(n, edges, features, labels, name=name, meta=meta)


def _check_meta(meta: dict, n: int, d: int, labels: np.ndarray | None) -> None:
    if "n" in meta and int(meta["n"]) != n:
        raise GraphFormatError(f"meta.json says n={meta['n']}, data has {n} nodes")
    if "d" in meta and int(meta["d"]) != d:
        raise GraphFormatError(f"meta.json says d={meta['d']}, data has {d} features")
    if "num_classes" in meta and labels is not None:
        found = int(np.unique(labels).size)
        if int(meta["num_classes"]) != found:
            raise GraphFormatError(f"meta.json says {meta['num_classes']} classes, labels have {found}")


def format_row(values: Iterable[float]) -> str:
    return ",".join(repr(float(v)) for v in values)


def save_graph(g: AttributedGraph, dir_path: str | Path) -> Path:
    """Write ``g`` in canonical form: sorted ``i < j`` edges, shortest round-trip floats."""
    root = Path(dir_path)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "edges.tsv", "w") as fh:
        for i, j in g.edge_array().tolist():
            fh.write(f"{i}\t{j}\n")
    with open(root / "features.csv", "w") as fh:
        for row in g.features.tolist():
            fh.write(format_row(row) + "\n")
    meta = {"name": g.name, "n": g.num_nodes, "d": g.num_features}
    if g.labels is not None:
        (root / "labels.txt").write_text("".join(f"{int(y)}\n" for y in g.labels))
        meta["num_classes"] = int(np.unique(g.labels).size)
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return root
