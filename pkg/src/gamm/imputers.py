"""Reference imputers and the external-plugin bridge.

All imputers take the true feature matrix together with a boolean
``observed`` matrix and never read values at unobserved positions.
"""

from __future__ import annotations

import json
import logging
import os
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from gamm.errors import ExternalImputerError, SpecError
from gamm.graph import AttributedGraph, format_row

logger = logging.getLogger(__name__)


class ImputerMethod(str, Enum):
    TABULAR_MEAN = "tabular_mean"
    GRAPH_AVERAGE = "graph_average"
    FEATURE_PROPAGATION = "feature_propagation"
    EXTERNAL = "external"


@dataclass(frozen=True)
class ImputerConfig:
    method: ImputerMethod = ImputerMethod.FEATURE_PROPAGATION
    max_iters: int = 40
    convergence_tol: float = 1e-6
    command: str | None = None
    timeout: float | None = 600.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "method", ImputerMethod(self.method))
        if self.max_iters < 1:
            raise SpecError("max_iters must be >= 1")
        if not self.convergence_tol > 0:
            raise SpecError("convergence_tol must be > 0")
        if self.method is ImputerMethod.EXTERNAL and not self.command:
            raise SpecError("external imputer needs a command path")

    @classmethod
    def parse(cls, text: str, **overrides) -> ImputerConfig:
        """Parse ``tabular_mean``, ``graph_average``, ``feature_propagation`` or ``external:<path>``."""
        if text.startswith("external:"):
            return cls(ImputerMethod.EXTERNAL, command=text.split(":", 1)[1], **overrides)
        try:
            return cls(ImputerMethod(text), **overrides)
        except ValueError:
            raise SpecError(f"unknown imputer {text!r}") from None

    @property
    def label(self) -> str:
        if self.method is ImputerMethod.EXTERNAL:
            return "external:" + Path(self.command).name
        return self.method.value


@dataclass
class ImputationResult:
    values: np.ndarray
    method: str
    iterations: int = 0
    wall_time: float = 0.0
    flags: dict = field(default_factory=dict)


def _prepare(features: np.ndarray, observed: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    features = np.asarray(features, dtype=np.float64)
    observed = np.asarray(observed, dtype=bool)
    if features.shape != observed.shape:
        raise SpecError(f"features {features.shape} and mask {observed.shape} differ in shape")
    return features, observed


def _column_means(features: np.ndarray, observed: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    counts = observed.sum(axis=0)
    sums = np.where(observed, features, 0.0).sum(axis=0)
    empty = counts == 0
    means = np.divide(sums, counts, out=np.zeros_like(sums), where=~empty)
    return means, empty


def impute_tabular_mean(features: np.ndarray, observed: np.ndarray) -> ImputationResult:
    """Fill each missing entry with the mean of the observed entries of its column.

    Columns with no observed entry are filled with 0.0 and listed in
    ``flags["empty_columns"]``.
    """
    start = time.perf_counter()
    features, observed = _prepare(features, observed)
    means, empty = _column_means(features, observed)
    out = np.where(observed, features, means[None, :])
    flags = {"empty_columns": np.flatnonzero(empty).tolist()}
    return ImputationResult(out, ImputerMethod.TABULAR_MEAN.value, 0, time.perf_counter() - start, flags)


def impute_graph_average(g: AttributedGraph, features: np.ndarray, observed: np.ndarray) -> ImputationResult:
    """One pass of neighbor averaging over observed 1-hop neighbors.

    Entries without an observed neighbor fall back to the column mean, and
    to 0.0 when the column has no observed entry at all.
    """
    start = time.perf_counter()
    features, observed = _prepare(features, observed)
    adj = g.adjacency()
    obs = observed.astype(np.float64)
    sums = adj @ np.where(observed, features, 0.0)
    counts = adj @ obs
    means, empty = _column_means(features, observed)
    has = counts > 0
    neighbor_avg = np.divide(sums, counts, out=np.zeros_like(sums), where=has)
    fill = np.where(has, neighbor_avg, means[None, :])
    out = np.where(observed, features, fill)
    flags = {
        "empty_columns": np.flatnonzero(empty).tolist(),
        "fallback_entries": int(np.count_nonzero(~observed & ~has)),
    }
    return ImputationResult(out, ImputerMethod.GRAPH_AVERAGE.value, 1, time.perf_counter() - start, flags)


def normalized_adjacency(g: AttributedGraph) -> sp.csr_matrix:
    """``D^-1/2 A D^-1/2``; rows of isolated nodes are empty."""
    deg = g.degrees.astype(np.float64)
    inv_sqrt = np.zeros_like(deg)
    np.divide(1.0, np.sqrt(deg), out=inv_sqrt, where=deg > 0)
    d = sp.diags(inv_sqrt)
    return (d @ g.adjacency() @ d).tocsr()


def impute_feature_propagation(
    g: AttributedGraph,
    features: np.ndarray,
    observed: np.ndarray,
    cfg: ImputerConfig | None = None,
) -> ImputationResult:
    """Diffuse observed values over the normalized adjacency, clamping observed entries.

    Iteration stops once the largest absolute change is at most
    ``cfg.convergence_tol`` or after ``cfg.max_iters`` steps. Isolated nodes
    keep their current value, so their missing entries stay at 0.0; the
    count of such entries is reported in ``flags["unreachable_entries"]``.
    """
    cfg = cfg or ImputerConfig(ImputerMethod.FEATURE_PROPAGATION)
    start = time.perf_counter()
    features, observed = _prepare(features, observed)
    prop = normalized_adjacency(g)
    isolated = g.degrees == 0
    known = np.where(observed, features, 0.0)
    x = known.copy()
    residuals = []
    iterations = 0
    if not observed.all():
        for iterations in range(1, cfg.max_iters + 1):
            nxt = prop @ x
            nxt[isolated] = x[isolated]
            nxt[observed] = known[observed]
            delta = float(np.max(np.abs(nxt - x))) if x.size else 0.0
            residuals.append(delta)
            x = nxt
            if delta <= cfg.convergence_tol:
                break
    flags = {
        "unreachable_entries": int(np.count_nonzero(~observed[isolated])),
        "converged": bool(not residuals or residuals[-1] <= cfg.convergence_tol),
        "residuals": residuals,
    }
    return ImputationResult(x, ImputerMethod.FEATURE_PROPAGATION.value, iterations, time.perf_counter() - start, flags)


def _write_exchange(root: Path, g: AttributedGraph, features: np.ndarray, observed: np.ndarray, spec: dict) -> None:
    with open(root / "edges.tsv", "w") as fh:
        for i, j in g.edge_array().tolist():
            fh.write(f"{i}\t{j}\n")
    with open(root / "features.csv", "w") as fh:
        for row in np.where(observed, features, 0.0).tolist():
            fh.write(format_row(row) + "\n")
    with open(root / "mask.csv", "w") as fh:
        for row in observed.tolist():
            fh.write(",".join("1" if v else "0" for v in row) + "\n")
    (root / "spec.json").write_text(json.dumps(spec, indent=2, sort_keys=True))


def _command_for(path: str) -> list[str]:
    if path.endswith(".py") and not os.access(path, os.X_OK):
        return [sys.executable, path]
    return [path]


def run_external_imputer(
    descriptor: ImputerConfig | str,
    g: AttributedGraph,
    features: np.ndarray,
    observed: np.ndarray,
    spec: dict | None = None,
) -> ImputationResult:
    """Run a plugin executable through the file-exchange protocol.

    The plugin receives the exchange directory as its only argument. It
    finds ``edges.tsv``, ``features.csv`` (missing entries zero-filled),
    ``mask.csv`` and ``spec.json`` there and must write ``imputed.csv``.
    """
    cfg = descriptor if isinstance(descriptor, ImputerConfig) else ImputerConfig.parse(descriptor)
    if cfg.method is not ImputerMethod.EXTERNAL:
        raise SpecError(f"{cfg.method.value} is not an external imputer")
    features, observed = _prepare(features, observed)
    start = time.perf_counter()
    info = {"n": int(features.shape[0]), "d": int(features.shape[1]), "mechanism": spec}
    with tempfile.TemporaryDirectory(prefix="gamm-plugin-") as tmp:
        root = Path(tmp)
        _write_exchange(root, g, features, observed, info)
        cmd = _command_for(cfg.command) + [str(root)]
        try:
            proc = subprocess.run(cmd, capture_output=True, text=True, timeout=cfg.timeout)
        except subprocess.TimeoutExpired as exc:
            partial = (exc.stdout or b"")[-2000:], (exc.stderr or b"")[-2000:]
            raise ExternalImputerError(
                f"plugin {cfg.command} timed out after {cfg.timeout}s; "
                f"stdout tail: {_text(partial[0])!r}; stderr tail: {_text(partial[1])!r}"
            ) from None
        except OSError as exc:
            raise ExternalImputerError(f"cannot run plugin {cfg.command}: {exc}") from None
        if proc.returncode != 0:
            raise ExternalImputerError(
                f"plugin {cfg.command} exited with status {proc.returncode}: {proc.stderr[-2000:]}"
            )
        out_path = root / "imputed.csv"
        if not out_path.is_file():
            raise ExternalImputerError(f"plugin {cfg.command} did not write imputed.csv")
        try:
            values = np.loadtxt(out_path, delimiter=",", dtype=np.float64, ndmin=2)
        except ValueError as exc:
            raise ExternalImputerError(f"malformed imputed.csv: {exc}") from None
    if values.shape != features.shape:
        raise ExternalImputerError(f"imputed.csv has shape {values.shape}, expected {features.shape}")
    if not np.all(np.isfinite(values)):
        raise ExternalImputerError("imputed.csv contains non-finite values")
    changed = observed & (values != features)
    if changed.any():
        i, j = np.argwhere(changed)[0]
        raise ExternalImputerError(
            f"plugin altered {int(changed.sum())} observed entries (first at row {i}, column {j})"
        )
    flags = {"stdout_tail": proc.stdout[-500:], "unchanged_missing_entries": int(np.count_nonzero(~observed & (values == 0.0)))}
    return ImputationResult(values, cfg.label, 0, time.perf_counter() - start, flags)


def _text(data) -> str:
    return data.decode("utf-8", "replace") if isinstance(data, bytes) else str(data)


def impute(
    cfg: ImputerConfig | str,
    g: AttributedGraph,
    features: np.ndarray,
    observed: np.ndarray,
    spec: dict | None = None,
) -> ImputationResult:
    """Dispatch to the imputer named by ``cfg``."""
    cfg = cfg if isinstance(cfg, ImputerConfig) else ImputerConfig.parse(cfg)
    if cfg.method is ImputerMethod.TABULAR_MEAN:
        return impute_tabular_mean(features, observed)
    if cfg.method is ImputerMethod.GRAPH_AVERAGE:
        return impute_graph_average(g, features, observed)
    if cfg.method is ImputerMethod.FEATURE_PROPAGATION:
        return impute_feature_propagation(g, features, observed, cfg)
    return run_external_imputer(cfg, g, features, observed, spec)
