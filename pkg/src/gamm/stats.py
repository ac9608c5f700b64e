"""Rank test and kernel density estimation used by the evaluation protocol."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.stats import norm, rankdata

EXACT_MAX_TOTAL = 24


class MannWhitneyResult(NamedTuple):
    u: float
    p_value: float
    method: str


def _rank_sum_counts(doubled_ranks: np.ndarray, k: int) -> dict[int, int]:
    """Number of k-subsets of ``doubled_ranks`` per subset sum (exact integer counts)."""
    # table[j] maps subset-sum -> count over subsets of size j
    table: list[dict[int, int]] = [dict() for _ in range(k + 1)]
    table[0][0] = 1
    for r in doubled_ranks.tolist():
        for j in range(min(k, len(table) - 1), 0, -1):
            prev = table[j - 1]
            if not prev:
                continue
            cur = table[j]
            for s, c in prev.items():
                cur[s + r] = cur.get(s + r, 0) + c
    return table[k]


def mann_whitney_u(
    sample_a: Sequence[float], sample_b: Sequence[float], method: str = "auto"
) -> MannWhitneyResult:
    """Two-sided Wilcoxon-Mann-Whitney test.

    Returns ``U`` for ``sample_a`` (pairs with ``a > b`` plus half the ties)
    and the two-sided p-value ``P(|U - n1 n2 / 2| >= |u - n1 n2 / 2|)``.
    With ``method="auto"`` the null distribution is enumerated exactly over
    all assignments of the pooled midranks when ``n1 + n2 <= 24`` and the
    tie-corrected normal approximation with continuity correction is used
    otherwise. If every value is identical the p-value is 1.0 and
    ``method`` is ``"degenerate"``.
    """
    a = np.asarray(sample_a, dtype=np.float64).ravel()
    b = np.asarray(sample_b, dtype=np.float64).ravel()
    n1, n2 = a.size, b.size
    if n1 == 0 or n2 == 0:
        raise ValueError("both samples must be non-empty")
    if method not in ("auto", "exact", "normal"):
        raise ValueError(f"unknown method {method!r}")
    pooled = np.concatenate([a, b])
    ranks = rankdata(pooled)
    doubled = np.rint(2 * ranks).astype(np.int64)
    # 2U = 2 R_a - n1 (n1 + 1); kept in integers to make tail comparisons exact
    u2 = int(doubled[:n1].sum()) - n1 * (n1 + 1)
    u = u2 / 2.0
    if np.all(pooled == pooled[0]):
        return MannWhitneyResult(u, 1.0, "degenerate")
    centre2 = n1 * n2  # 2 * E[U]
    dev2 = abs(u2 - centre2)

    use_exact = method == "exact" or (method == "auto" and n1 + n2 <= EXACT_MAX_TOTAL)
    if use_exact:
        counts = _rank_sum_counts(doubled, n1)
        offset = n1 * (n1 + 1)
        extreme = sum(c for s, c in counts.items() if abs(s - offset - centre2) >= dev2)
        return MannWhitneyResult(u, min(1.0, extreme / math.comb(n1 + n2, n1)), "exact")

    total = n1 + n2
    _, tie_sizes = np.unique(pooled, return_counts=True)
    tie_term = float(np.sum(tie_sizes.astype(np.float64) ** 3 - tie_sizes)) / (total * (total - 1))
    var = n1 * n2 / 12.0 * ((total + 1) - tie_term)
    z = max(0.0, dev2 / 2.0 - 0.5) / math.sqrt(var)
    return MannWhitneyResult(u, min(1.0, 2.0 * float(norm.sf(z))), "normal")


# --- kernel density ---------------------------------------------------------

BANDWIDTH_FLOOR = 1e-6


def silverman_bandwidth(values: np.ndarray) -> float:
    """``0.9 * min(sd, IQR / 1.34) * m^(-1/5)`` with a floor of 1e-6.

    When the IQR is zero but the standard deviation is not (e.g. a binary
    column dominated by one value) the standard deviation is used alone.
    """
    x = np.asarray(values, dtype=np.float64)
    m = x.size
    sd = float(x.std(ddof=1)) if m > 1 else 0.0
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34)
    if spread <= 0:
        spread = sd
    return max(0.9 * spread * m ** (-0.2), BANDWIDTH_FLOOR)


def gaussian_kde(values: np.ndarray, grid: np.ndarray, bandwidth: float, chunk: int = 1 << 22) -> np.ndarray:
    x = np.asarray(values, dtype=np.float64)
    out = np.zeros(grid.size)
    step = max(1, chunk // max(1, grid.size))
    for lo in range(0, x.size, step):
        diff = (grid[:, None] - x[None, lo : lo + step]) / bandwidth
        out += np.exp(-0.5 * diff * diff).sum(axis=1)
    return out / (x.size * bandwidth * math.sqrt(2 * math.pi))


@dataclass(frozen=True)
class DensityExport:
    """KDE curves of several sources evaluated on one shared grid."""

    feature: int | str
    x: np.ndarray
    densities: dict[str, np.ndarray]
    bandwidths: dict[str, float]

    def to_csv(self, truth_key: str = "truth") -> str:
        keys = [truth_key] + [k for k in self.densities if k != truth_key]
        header = ["x"] + [f"{truth_key}_density" if k == truth_key else k for k in keys]
        lines = [",".join(header)]
        for i, xv in enumerate(self.x.tolist()):
            lines.append(",".join([repr(xv)] + [repr(float(self.densities[k][i])) for k in keys]))
        return "\n".join(lines) + "\n"


def kde_export(
    values: np.ndarray | dict[str, np.ndarray], grid_size: int = 512, feature: int | str = 0
) -> DensityExport:
    """Gaussian KDE with Silverman bandwidth on a uniform grid.

    ``values`` is either one sample (stored under the key ``"values"``) or a
    mapping of source name to sample; all sources share a grid spanning
    ``[min - 3h, max + 3h]`` over the sources, ``h`` being the largest
    bandwidth.
    """
    sources = {"values": values} if not isinstance(values, dict) else values
    if grid_size < 2:
        raise ValueError("grid_size must be at least 2")
    arrays = {}
    for key, v in sources.items():
        arr = np.asarray(v, dtype=np.float64).ravel()
        if arr.size == 0:
            raise ValueError(f"empty sample for {key!r}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite values in {key!r}")
        arrays[key] = arr
    bws = {k: silverman_bandwidth(a) for k, a in arrays.items()}
    h = max(bws.values())
    lo = min(float(a.min()) for a in arrays.values()) - 3 * h
    hi = max(float(a.max()) for a in arrays.values()) + 3 * h
    grid = np.linspace(lo, hi, grid_size)
    dens = {k: gaussian_kde(a, grid, bws[k]) for k, a in arrays.items()}
    return DensityExport(feature, grid, dens, bws)
