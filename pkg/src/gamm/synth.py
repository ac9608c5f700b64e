"""Stochastic-block-model graphs with class-conditional independent Gaussian features."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from gamm.errors import SpecError
from gamm.graph import AttributedGraph


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of :func:`generate_sbm`.

    Node ``i`` belongs to block ``i * K // n``. Column ``j`` of a class-``k``
    node is ``Normal(class_shift * level_j(k), noise_sd^2)`` where
    ``level_j`` is a permutation of ``{0, 1/(K-1), ..., 1}`` drawn once per
    column (``shift_pattern="permuted"``) or the identity for every column
    (``shift_pattern="aligned"``).
    """

    num_nodes: int = 1000
    num_blocks: int = 2
    p_in: float = 0.05
    p_out: float = 0.005
    class_shift: float = 1.0
    num_features: int = 16
    noise_sd: float = 0.1
    seed: int = 0
    shift_pattern: str = "permuted"
    name: str = "sbm"

    def __post_init__(self) -> None:
        if self.num_blocks < 2:
            raise SpecError("num_blocks must be at least 2")
        if self.num_nodes < self.num_blocks:
            raise SpecError("need at least one node per block")
        for p in (self.p_in, self.p_out):
            if not 0.0 <= p <= 1.0:
                raise SpecError(f"edge probability {p} outside [0, 1]")
        if self.noise_sd < 0:
            raise SpecError("noise_sd must be non-negative")
        if self.num_features < 0:
            raise SpecError("num_features must be non-negative")
        if self.shift_pattern not in ("permuted", "aligned"):
            raise SpecError(f"unknown shift_pattern {self.shift_pattern!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> SynthSpec:
        try:
            return cls(**data)
        except TypeError as exc:
            raise SpecError(f"invalid synth spec: {exc}") from None


def _unrank_upper(t: np.ndarray, s: int) -> tuple[np.ndarray, np.ndarray]:
    """Map row-major ranks of the strict upper triangle of an ``s x s`` matrix to (i, j)."""
    t = t.astype(np.int64)
    b = 2 * s - 1
    i = np.floor((b - np.sqrt(np.maximum(b * b - 8.0 * t, 0.0))) / 2).astype(np.int64)
    start = i * (2 * s - i - 1) // 2
    # correct float rounding at row boundaries
    over = start > t
    i[over] -= 1
    start = i * (2 * s - i - 1) // 2
    under = t - start >= s - 1 - i
    i[under] += 1
    start = i * (2 * s - i - 1) // 2
    return i, t - start + i + 1


def _sample_pairs(rng: np.random.Generator, total: int, p: float) -> np.ndarray:
    if total == 0 or p == 0.0:
        return np.empty(0, dtype=np.int64)
    if p == 1.0:
        return np.arange(total, dtype=np.int64)
    k = int(rng.binomial(total, p))
    return np.sort(rng.choice(total, size=k, replace=False))


def sbm_edges(rng: np.random.Generator, sizes: list[int], p_in: float, p_out: float) -> np.ndarray:
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    chunks = []
    for a, sa in enumerate(sizes):
        for b in range(a, len(sizes)):
            sb = sizes[b]
            if a == b:
                ranks = _sample_pairs(rng, sa * (sa - 1) // 2, p_in)
                i, j = _unrank_upper(ranks, sa)
            else:
                ranks = _sample_pairs(rng, sa * sb, p_out)
                i, j = ranks // sb, ranks % sb
            chunks.append(np.column_stack([i + offsets[a], j + offsets[b]]))
    return np.concatenate(chunks) if chunks else np.empty((0, 2), dtype=np.int64)


def class_levels(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """``K x d`` matrix of class means per column."""
    k, d = spec.num_blocks, spec.num_features
    base = np.arange(k) / (k - 1)
    if spec.shift_pattern == "aligned":
        levels = np.repeat(base[:, None], d, axis=1)
    else:
        levels = np.column_stack([rng.permutation(base) for _ in range(d)]) if d else np.zeros((k, 0))
    return spec.class_shift * levels


def generate_sbm(spec: SynthSpec) -> AttributedGraph:
    """Sample an SBM graph with labels equal to block ids; deterministic in ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    n, k = spec.num_nodes, spec.num_blocks
    labels = np.arange(n) * k // n
    sizes = np.bincount(labels, minlength=k).tolist()
    edges = sbm_edges(rng, sizes, spec.p_in, spec.p_out)
    means = class_levels(spec, rng)[labels]
    noise = rng.normal(0.0, 1.0, size=(n, spec.num_features)) * spec.noise_sd
    features = means + noise
    return AttributedGraph.from_edges(n, edges, features, labels, name=spec.name, meta={"synth": spec.to_dict()})


class IndependenceReport(NamedTuple):
    max_abs_corr: float
    constant_columns: list[int]


def column_independence_check(g: AttributedGraph) -> IndependenceReport:
    """Largest off-diagonal |Pearson correlation| between feature columns.

    Columns are centred within each class before pooling, so the check
    measures class-conditional dependence. Constant columns get zero
    correlation and are reported.
    """
    x = np.asarray(g.features, dtype=np.float64)
    if x.shape[1] < 2:
        raise SpecError("need at least two feature columns")
    labels = g.labels if g.labels is not None else np.zeros(x.shape[0], dtype=np.int64)
    centred = x.copy()
    for c in np.unique(labels):
        rows = labels == c
        centred[rows] -= centred[rows].mean(axis=0)
    ss = np.sqrt((centred * centred).sum(axis=0))
    const = ss <= 1e-12 * max(1.0, float(np.abs(x).max()))
    scale = np.where(const, 1.0, ss)
    normed = centred / scale
    corr = normed.T @ normed
    corr[const, :] = 0.0
    corr[:, const] = 0.0
    np.fill_diagonal(corr, 0.0)
    return IndependenceReport(float(np.abs(corr).max()), np.flatnonzero(const).tolist())


def expected_edges(spec: SynthSpec) -> float:
    sizes = np.bincount(np.arange(spec.num_nodes) * spec.num_blocks // spec.num_nodes)
    within = float(sum(s * (s - 1) / 2 for s in sizes))
    between = float(math.comb(spec.num_nodes, 2)) - within
    return spec.p_in * within + spec.p_out * between
