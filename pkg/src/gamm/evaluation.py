"""Reconstruction metrics and mechanism-comparison tables."""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from gamm.errors import MetricError
from gamm.stats import mann_whitney_u

SIGNIFICANCE_LEVEL = 0.05
OUTCOMES = ("degradation", "no_change", "improvement")


def masked_mae_rmse(f_true: np.ndarray, f_hat: np.ndarray, observed: np.ndarray) -> tuple[float, float]:
    """MAE and RMSE over the masked entries only."""
    f_true = np.asarray(f_true, dtype=np.float64)
    f_hat = np.asarray(f_hat, dtype=np.float64)
    observed = np.asarray(observed, dtype=bool)
    if not f_true.shape == f_hat.shape == observed.shape:
        raise MetricError(f"shape mismatch: {f_true.shape}, {f_hat.shape}, {observed.shape}")
    resid = (f_hat - f_true)[~observed]
    if resid.size == 0:
        raise MetricError("no missing entries: reconstruction error is undefined")
    abs_resid = np.abs(resid)
    scale = float(abs_resid.max())
    if scale == 0.0:
        return 0.0, 0.0
    # rescaled so tiny residuals do not underflow when squared
    rmse = scale * math.sqrt(float(np.mean((abs_resid / scale) ** 2)))
    return float(np.mean(abs_resid)), rmse


def degradation_pct(metric_ref: float, metric_new: float) -> float:
    """``100 * (ref - new) / ref``; negative when the new setting has the larger error."""
    if not metric_ref > 0:
        raise MetricError(f"reference metric must be positive, got {metric_ref}")
    return 100.0 * (metric_ref - metric_new) / metric_ref


@dataclass(frozen=True)
class MetricSample:
    dataset: str
    mechanism: str
    p_miss: float
    imputer: str
    repetition: int
    seed: int
    mae: float
    rmse: float

    def __post_init__(self) -> None:
        if self.mae < 0:
            raise MetricError("mae must be non-negative")
        # power-mean inequality; tolerance covers summation rounding
        if self.rmse < self.mae * (1 - 1e-12):
            raise MetricError(f"rmse {self.rmse} below mae {self.mae}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ComparisonCell:
    imputer: str
    dataset: str
    p_miss: float
    mechanism_a: str
    mechanism_b: str
    metric: str
    mean_a: float
    mean_b: float
    degradation_pct: float
    u_statistic: float
    p_value: float
    significant: bool
    direction: str
    n_a: int
    n_b: int


@dataclass
class OutcomeSummary:
    """Outcome counts per comparison family; percentages are shares of all cells."""

    counts: dict[str, dict[str, int]] = field(default_factory=dict)
    total: int = 0

    def add(self, family: str, outcome: str) -> None:
        fam = self.counts.setdefault(family, {o: 0 for o in OUTCOMES})
        fam[outcome] += 1
        self.total += 1

    def merge(self, other: OutcomeSummary) -> None:
        for fam, counts in other.counts.items():
            mine = self.counts.setdefault(fam, {o: 0 for o in OUTCOMES})
            for outcome, c in counts.items():
                mine[outcome] += c
                self.total += c

    def overall(self) -> dict[str, int]:
        out = {o: 0 for o in OUTCOMES}
        for counts in self.counts.values():
            for o in OUTCOMES:
                out[o] += counts[o]
        return out

    def percentages(self) -> dict[str, dict[str, float]]:
        if self.total == 0:
            return {}
        rows = {fam: counts for fam, counts in self.counts.items()}
        rows["total"] = self.overall()
        return {
            fam: {**{o: 100.0 * c[o] / self.total for o in OUTCOMES}, "total": 100.0 * sum(c.values()) / self.total}
            for fam, c in rows.items()
        }

    def to_dict(self) -> dict:
        return {"counts": self.counts, "overall": self.overall(), "total": self.total, "percentages": self.percentages()}


def family_name(mechanism_a: str, mechanism_b: str) -> str:
    return f"{mechanism_a}_vs_{mechanism_b}"


@dataclass
class ComparisonTable:
    family: tuple[str, str]
    metric: str
    cells: list[ComparisonCell]
    missing: list[dict]
    summary: OutcomeSummary

    @property
    def name(self) -> str:
        return family_name(*self.family)

    def to_dict(self) -> dict:
        return {
            "family": list(self.family),
            "metric": self.metric,
            "cells": [asdict(c) for c in self.cells],
            "missing": self.missing,
            "summary": self.summary.to_dict(),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["imputer", "dataset", "p_miss", "degradation_pct", "p_value", "significant"])
        for c in self.cells:
            writer.writerow([c.imputer, c.dataset, repr(c.p_miss), repr(c.degradation_pct), repr(c.p_value), int(c.significant)])
        return buf.getvalue()


def compare_samples(values_a: list[float], values_b: list[float]) -> tuple[float, float, float, bool, str]:
    """Degradation of B relative to A (mean-based) with the U test across repetitions."""
    mean_a, mean_b = float(np.mean(values_a)), float(np.mean(values_b))
    pct = degradation_pct(mean_a, mean_b)
    res = mann_whitney_u(values_a, values_b)
    significant = res.p_value < SIGNIFICANCE_LEVEL
    if not significant or pct == 0:
        direction = "no_change"
    else:
        direction = "degradation" if pct < 0 else "improvement"
    return pct, res.u, res.p_value, significant, direction


def build_comparison_table(
    samples: Iterable[MetricSample], family: tuple[str, str], metric: str = "mae", min_reps: int = 2
) -> ComparisonTable:
    """Compare mechanism ``family[1]`` against the reference ``family[0]``.

    One cell per ``(imputer, dataset, p_miss)`` that has at least
    ``min_reps`` repetitions under both mechanisms; every other combination
    is listed in ``missing`` with the reason.
    """
    ref, new = family
    groups: dict[tuple, dict[str, list[float]]] = defaultdict(lambda: {ref: [], new: []})
    for s in samples:
        if s.mechanism in (ref, new):
            groups[(s.imputer, s.dataset, float(s.p_miss))][s.mechanism].append(float(getattr(s, metric)))
    cells, missing = [], []
    summary = OutcomeSummary()
    fam = family_name(ref, new)
    for (imputer, dataset, p_miss) in sorted(groups):
        vals = groups[(imputer, dataset, p_miss)]
        key = {"imputer": imputer, "dataset": dataset, "p_miss": p_miss}
        if len(vals[ref]) < min_reps or len(vals[new]) < min_reps:
            missing.append({**key, "reason": f"repetitions {len(vals[ref])}/{len(vals[new])} < {min_reps}"})
            continue
        if not np.mean(vals[ref]) > 0:
            missing.append({**key, "reason": "reference metric is zero"})
            continue
        pct, u, p, sig, direction = compare_samples(vals[ref], vals[new])
        cells.append(
            ComparisonCell(
                imputer, dataset, p_miss, ref, new, metric,
                float(np.mean(vals[ref])), float(np.mean(vals[new])),
                pct, u, p, sig, direction, len(vals[ref]), len(vals[new]),
            )
        )
        summary.add(fam, direction)
    return ComparisonTable((ref, new), metric, cells, missing, summary)
