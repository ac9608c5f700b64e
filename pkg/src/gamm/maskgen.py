"""Graph-aware missingness mechanisms.

Every mechanism maps each missable entry ``(i, j)`` to a standardized driver
``z_ij`` and masks it with probability ``sigmoid(s * omega * z_ij + b)``,
where ``s`` is the sign of the dependence and the bias ``b`` is solved so the
expected missing rate over missable entries equals ``p_miss`` exactly.

Drivers per kind:

========  ==============================================================
MCAR      constant 0
A_MAR     mean of the node's observed columns (global z-score)
A_MNAR    the entry's own value (per-column z-score)
S_MAR     log1p(degree) (global z-score)
N_MAR     mean over the h-hop neighborhood of the A_MAR aggregate
N_MNAR    mean of column j over the h-hop neighborhood (per-column z-score)
G_MAR     standardized weighted sum of the A_MAR, S_MAR and N_MAR drivers
G_MNAR    standardized weighted sum of the A_MNAR, S_MAR and N_MNAR drivers
========  ==============================================================
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import jsonschema
import numpy as np
from scipy.special import expit, logit

from gamm.errors import MaskFormatError, SpecError, UnsupportedMechanismError
from gamm.graph import AttributedGraph, ColumnSplit, StructuralProfile, k_hop_matrix, structural_profile

CALIBRATION_TOL = 1e-9
DEFAULT_OMEGA = 3.0
MASK_MAGIC = b"GAMM"
MASK_VERSION = 1


class MechanismKind(str, Enum):
    MCAR = "MCAR"
    A_MAR = "A_MAR"
    A_MNAR = "A_MNAR"
    S_MAR = "S_MAR"
    S_MNAR = "S_MNAR"
    N_MAR = "N_MAR"
    N_MNAR = "N_MNAR"
    G_MAR = "G_MAR"
    G_MNAR = "G_MNAR"

    @classmethod
    def parse(cls, value: str | MechanismKind) -> MechanismKind:
        if isinstance(value, cls):
            return value
        key = str(value).strip().upper().replace("-", "_")
        try:
            return cls(key)
        except ValueError:
            raise SpecError(f"unknown mechanism {value!r}") from None

    @property
    def needs_observed_columns(self) -> bool:
        return self in (MechanismKind.A_MAR, MechanismKind.N_MAR, MechanismKind.G_MAR)

    @property
    def uses_hops(self) -> bool:
        return self.value[0] in "NG"

    @property
    def is_generic(self) -> bool:
        return self.value[0] == "G"


class Sign(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"

    @property
    def factor(self) -> float:
        return 1.0 if self is Sign.POSITIVE else -1.0


# Low observed values / low degree => more missing; high hidden values => more missing.
DEFAULT_SIGN = {
    MechanismKind.MCAR: Sign.POSITIVE,
    MechanismKind.A_MAR: Sign.NEGATIVE,
    MechanismKind.A_MNAR: Sign.POSITIVE,
    MechanismKind.S_MAR: Sign.NEGATIVE,
    MechanismKind.S_MNAR: Sign.NEGATIVE,
    MechanismKind.N_MAR: Sign.NEGATIVE,
    MechanismKind.N_MNAR: Sign.POSITIVE,
    MechanismKind.G_MAR: Sign.NEGATIVE,
    MechanismKind.G_MNAR: Sign.POSITIVE,
}

SPEC_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "MechanismSpec",
    "type": "object",
    "required": ["kind", "p_miss"],
    "additionalProperties": False,
    "properties": {
        "kind": {"type": "string"},
        "p_miss": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "hops": {"type": "integer", "minimum": 0},
        "omega": {"type": "number"},
        "sign": {"enum": ["positive", "negative"]},
        "observed_columns": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "g_weights": {
            "oneOf": [
                {"type": "null"},
                {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
            ]
        },
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "driver_column": {"oneOf": [{"type": "null"}, {"type": "integer", "minimum": 0}]},
    },
}


@dataclass(frozen=True)
class MechanismSpec:
    """Declarative description of one mechanism instance.

    ``sign`` defaults per kind (see ``DEFAULT_SIGN``). ``driver_column``
    replaces the observed-column average of the MAR drivers by a single
    observed column.
    """

    kind: MechanismKind
    p_miss: float
    hops: int = 1
    omega: float = DEFAULT_OMEGA
    sign: Sign | None = None
    observed_columns: tuple[int, ...] = ()
    g_weights: tuple[float, float, float] | None = None
    seed: int = 0
    driver_column: int | None = None

    def __post_init__(self) -> None:
        kind = MechanismKind.parse(self.kind)
        object.__setattr__(self, "kind", kind)
        sign = DEFAULT_SIGN[kind] if self.sign is None else Sign(self.sign)
        object.__setattr__(self, "sign", sign)
        object.__setattr__(self, "observed_columns", tuple(sorted({int(c) for c in self.observed_columns})))
        if self.g_weights is not None:
            object.__setattr__(self, "g_weights", tuple(float(w) for w in self.g_weights))

        if not 0.0 < float(self.p_miss) < 1.0:
            raise SpecError(f"p_miss must lie in (0, 1), got {self.p_miss}")
        if not math.isfinite(self.omega):
            raise SpecError("omega must be finite")
        if not 0 <= int(self.seed) < 2**64:
            raise SpecError("seed must be a 64-bit unsigned integer")
        if self.hops < 0 or (kind.uses_hops and self.hops < 1):
            raise SpecError(f"{kind.value} needs hops >= 1, got {self.hops}")
        if self.g_weights is not None:
            if not kind.is_generic:
                raise SpecError("g_weights are only valid for G_MAR / G_MNAR")
            if len(self.g_weights) != 3 or not all(math.isfinite(w) for w in self.g_weights):
                raise SpecError("g_weights must be three finite numbers (w_A, w_S, w_N)")
            if all(w == 0 for w in self.g_weights):
                raise SpecError("g_weights must not all be zero")
        if kind.needs_observed_columns and not self.observed_columns:
            raise SpecError(f"{kind.value} requires at least one observed column")
        if self.driver_column is not None and self.driver_column not in self.observed_columns:
            raise SpecError("driver_column must be one of the observed columns")

    @property
    def weights(self) -> tuple[float, float, float]:
        return self.g_weights if self.g_weights is not None else (1.0, 1.0, 1.0)

    def column_split(self, num_features: int) -> ColumnSplit:
        return ColumnSplit.from_observed(num_features, self.observed_columns)

    def validate_for(self, g: AttributedGraph) -> ColumnSplit:
        """Check the spec against a graph and return its column split."""
        if self.kind is MechanismKind.S_MNAR:
            raise UnsupportedMechanismError(
                "S_MNAR is unsupported under a fully observed topology: "
                "there are no missing structural properties to condition on"
            )
        d = g.num_features
        if self.observed_columns and self.observed_columns[-1] >= d:
            raise SpecError(f"observed column {self.observed_columns[-1]} out of range for d={d}")
        split = self.column_split(d)
        if not split.missable_columns:
            raise SpecError("every column is observed; nothing can be masked")
        return split

    def replace(self, **changes) -> MechanismSpec:
        data = self.to_dict()
        data.update(changes)
        return MechanismSpec.from_dict(data)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "p_miss": float(self.p_miss),
            "hops": int(self.hops),
            "omega": float(self.omega),
            "sign": self.sign.value,
            "observed_columns": list(self.observed_columns),
            "g_weights": list(self.g_weights) if self.g_weights is not None else None,
            "seed": int(self.seed),
            "driver_column": self.driver_column,
        }

    @classmethod
    def from_dict(cls, data: dict) -> MechanismSpec:
        try:
            jsonschema.validate(data, SPEC_SCHEMA)
        except jsonschema.ValidationError as exc:
            raise SpecError(f"invalid mechanism spec: {exc.message}") from None
        data = dict(data)
        if data.get("observed_columns") is not None:
            data["observed_columns"] = tuple(data["observed_columns"])
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> MechanismSpec:
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class DriverMatrix:
    """Standardized drivers; columns listed in ``column_split.observed_columns`` hold NaN."""

    values: np.ndarray
    constant_driver: np.ndarray
    column_split: ColumnSplit
    per_column: bool

    def missable_values(self) -> np.ndarray:
        return self.values[:, list(self.column_split.missable_columns)]


@dataclass(frozen=True)
class CalibrationResult:
    bias: float
    achieved_expected_rate: float
    iterations: int
    tolerance: float


def derive_seed(master_seed: int, *keys: int) -> int:
    """Deterministic 64-bit substream seed for ``(master_seed, keys...)``."""
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# --- drivers --------------------------------------------------------------


def _is_constant(x: np.ndarray) -> bool:
    if x.size == 0:
        return True
    lo, hi = float(x.min()), float(x.max())
    return hi - lo <= 1e-12 * max(1.0, abs(lo), abs(hi))


def _zscore(x: np.ndarray, valid: np.ndarray | None = None) -> tuple[np.ndarray, bool]:
    """z-score a vector over ``valid`` entries; invalid entries and constant inputs map to 0."""
    x = np.asarray(x, dtype=np.float64)
    valid = np.ones(x.shape, dtype=bool) if valid is None else valid
    out = np.zeros_like(x)
    xs = x[valid]
    if _is_constant(xs):
        return out, True
    out[valid] = (xs - xs.mean()) / xs.std()
    return out, False


def _zscore_columns(x: np.ndarray, valid_rows: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    out = np.zeros_like(x, dtype=np.float64)
    const = np.zeros(x.shape[1], dtype=bool)
    for c in range(x.shape[1]):
        out[:, c], const[c] = _zscore(x[:, c], valid_rows)
    return out, const


def _observed_aggregate(g: AttributedGraph, spec: MechanismSpec) -> np.ndarray:
    if spec.driver_column is not None:
        return g.features[:, spec.driver_column].astype(np.float64)
    return g.features[:, list(spec.observed_columns)].mean(axis=1)


def _neighborhood_mean(g: AttributedGraph, hops: int, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean of ``values`` rows over each node's h-hop neighborhood; returns (means, has_neighbors)."""
    reach = k_hop_matrix(g, hops)
    counts = np.asarray(reach.sum(axis=1)).ravel()
    has = counts > 0
    scale = np.where(has, counts, 1.0)
    sums = reach @ values
    return sums / (scale[:, None] if sums.ndim == 2 else scale), has


def _component_a(g, spec, missable, mnar):
    if mnar:
        return _zscore_columns(g.features[:, missable])
    z, const = _zscore(_observed_aggregate(g, spec))
    return z, const


def _component_s(profile):
    return _zscore(profile.log_degree)


def _component_n(g, spec, missable, mnar):
    if mnar:
        means, has = _neighborhood_mean(g, spec.hops, g.features[:, missable])
        return _zscore_columns(means, has)
    means, has = _neighborhood_mean(g, spec.hops, _observed_aggregate(g, spec))
    return _zscore(means, has)


def _broadcast(z: np.ndarray, const, m: int) -> tuple[np.ndarray, np.ndarray]:
    if z.ndim == 2:
        return z, np.asarray(const, dtype=bool)
    return np.repeat(z[:, None], m, axis=1), np.full(m, bool(const))


def build_driver(
    g: AttributedGraph, profile: StructuralProfile | None, spec: MechanismSpec
) -> DriverMatrix:
    """Standardized per-entry driver for ``spec`` on ``g``."""
    split = spec.validate_for(g)
    profile = profile if profile is not None else structural_profile(g)
    missable = list(split.missable_columns)
    n, m = g.num_nodes, len(missable)
    kind = spec.kind
    per_column = kind in (MechanismKind.A_MNAR, MechanismKind.N_MNAR, MechanismKind.G_MNAR)

    if kind is MechanismKind.MCAR:
        z, const = np.zeros((n, m)), np.ones(m, dtype=bool)
    elif kind is MechanismKind.A_MAR:
        z, const = _broadcast(*_component_a(g, spec, missable, mnar=False), m)
    elif kind is MechanismKind.A_MNAR:
        z, const = _component_a(g, spec, missable, mnar=True)
    elif kind is MechanismKind.S_MAR:
        z, const = _broadcast(*_component_s(profile), m)
    elif kind is MechanismKind.N_MAR:
        z, const = _broadcast(*_component_n(g, spec, missable, mnar=False), m)
    elif kind is MechanismKind.N_MNAR:
        z, const = _component_n(g, spec, missable, mnar=True)
    else:
        z, const = _generic_driver(g, profile, spec, missable, mnar=per_column)
    values = np.full((n, g.num_features), np.nan)
    values[:, missable] = z
    const_full = np.zeros(g.num_features, dtype=bool)
    const_full[missable] = const
    return DriverMatrix(values=values, constant_driver=const_full, column_split=split, per_column=per_column)


def _generic_driver(g, profile, spec, missable, mnar):
    m = len(missable)
    w_a, w_s, w_n = spec.weights
    builders = (
        (w_a, lambda: _component_a(g, spec, missable, mnar)),
        (w_s, lambda: _component_s(profile)),
        (w_n, lambda: _component_n(g, spec, missable, mnar)),
    )
    active = [(w, build) for w, build in builders if w != 0]
    if len(active) == 1 and active[0][0] > 0:
        # a single positively weighted standardized driver is already standardized
        return _broadcast(*active[0][1](), m)
    total = np.zeros((g.num_nodes, m) if mnar else g.num_nodes)
    for w, build in active:
        z, _ = build()
        if mnar and z.ndim == 1:
            z = z[:, None]
        total = total + w * z
    if mnar:
        return _zscore_columns(total)
    return _broadcast(*_zscore(total), m)


# --- calibration and sampling --------------------------------------------


def _logits(driver: DriverMatrix, spec: MechanismSpec) -> np.ndarray:
    z = driver.missable_values()
    if not driver.per_column:
        z = z[:, :1]
    return spec.sign.factor * spec.omega * z


def calibrate_bias(
    driver: DriverMatrix, spec: MechanismSpec, tol: float = CALIBRATION_TOL
) -> CalibrationResult:
    """Solve ``mean(sigmoid(s*omega*z + b)) = p_miss`` for ``b`` by bisection."""
    p = float(spec.p_miss)
    x = _logits(driver, spec).ravel()
    centre = float(logit(p))
    span = float(np.abs(x).max()) if x.size else 0.0
    if span == 0.0:
        return CalibrationResult(centre, float(expit(centre)), 0, tol)

    lo, hi = centre - span - 1.0, centre + span + 1.0
    iterations = 0
    while iterations < 200:
        iterations += 1
        mid = 0.5 * (lo + hi)
        if float(np.mean(expit(x + mid))) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-13 * max(1.0, abs(mid)):
            break
    bias = 0.5 * (lo + hi)
    rate = float(np.mean(expit(x + bias)))
    if abs(rate - p) > tol:
        raise SpecError(f"calibration did not reach p_miss={p} (got {rate}); target too extreme")
    return CalibrationResult(bias, rate, iterations, tol)


def missing_probabilities(driver: DriverMatrix, spec: MechanismSpec, bias: float) -> np.ndarray:
    """``n x |missable|`` matrix of per-entry missingness probabilities."""
    x = spec.sign.factor * spec.omega * driver.missable_values()
    return expit(x + bias)


@dataclass(frozen=True, eq=False)
class Mask:
    """Observation indicator: ``observed[i, j]`` is True when entry (i, j) is kept."""

    observed: np.ndarray
    column_split: ColumnSplit
    spec: MechanismSpec | None = None
    calibration: CalibrationResult | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        obs = np.array(self.observed, dtype=bool, copy=True)
        if obs.ndim != 2 or obs.shape[1] != self.column_split.num_features:
            raise MaskFormatError("mask shape does not match its column split")
        if not obs[:, list(self.column_split.observed_columns)].all():
            raise MaskFormatError("observed columns must never be masked")
        obs.setflags(write=False)
        object.__setattr__(self, "observed", obs)

    @property
    def shape(self) -> tuple[int, int]:
        return self.observed.shape

    @property
    def missing(self) -> np.ndarray:
        return ~self.observed

    @property
    def num_missing(self) -> int:
        return int(self.observed.size - np.count_nonzero(self.observed))

    def provenance(self) -> dict:
        return {
            "observed_columns": list(self.column_split.observed_columns),
            "spec": self.spec.to_dict() if self.spec is not None else None,
            "calibration": asdict(self.calibration) if self.calibration is not None else None,
            "info": self.info,
        }

    def to_bytes(self) -> bytes:
        n, d = self.shape
        header = MASK_MAGIC + struct.pack("<HQQ", MASK_VERSION, n, d)
        bits = np.packbits(self.observed.ravel()).tobytes()
        trailer = json.dumps(self.provenance(), sort_keys=True).encode("utf-8")
        return header + bits + trailer + struct.pack("<Q", len(trailer))

    @classmethod
    def from_bytes(cls, blob: bytes) -> Mask:
        head = len(MASK_MAGIC) + struct.calcsize("<HQQ")
        if len(blob) < head + 8 or blob[:4] != MASK_MAGIC:
            raise MaskFormatError("not a GAMM mask file")
        version, n, d = struct.unpack("<HQQ", blob[4:head])
        if version != MASK_VERSION:
            raise MaskFormatError(f"unsupported mask format version {version}")
        nbits = (n * d + 7) // 8
        (tlen,) = struct.unpack("<Q", blob[-8:])
        if head + nbits + tlen + 8 != len(blob):
            raise MaskFormatError("mask file length does not match its header")
        bits = np.frombuffer(blob[head : head + nbits], dtype=np.uint8)
        observed = np.unpackbits(bits, count=n * d).astype(bool).reshape(n, d)
        try:
            prov = json.loads(blob[head + nbits : head + nbits + tlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise MaskFormatError(f"bad provenance trailer: {exc}") from None
        split = ColumnSplit.from_observed(d, prov.get("observed_columns", []))
        spec = MechanismSpec.from_dict(prov["spec"]) if prov.get("spec") else None
        calib = CalibrationResult(**prov["calibration"]) if prov.get("calibration") else None
        return cls(observed, split, spec, calib, prov.get("info", {}))

    def to_csv(self) -> str:
        return "".join(",".join("1" if v else "0" for v in row) + "\n" for row in self.observed.tolist())

    @classmethod
    def from_csv(cls, text: str, observed_columns=()) -> Mask:
        rows = [line.split(",") for line in text.splitlines() if line.strip()]
        try:
            obs = np.array([[int(v) for v in row] for row in rows], dtype=np.int64)
        except ValueError:
            raise MaskFormatError("mask CSV must contain only 0/1 values") from None
        if obs.ndim != 2 or not np.isin(obs, (0, 1)).all():
            raise MaskFormatError("mask CSV must be a rectangular 0/1 grid")
        return cls(obs.astype(bool), ColumnSplit.from_observed(obs.shape[1], observed_columns))

    def write(self, path: str | Path, fmt: str = "binary") -> Path:
        path = Path(path)
        if fmt == "binary":
            path.write_bytes(self.to_bytes())
        elif fmt == "csv":
            path.write_text(self.to_csv())
        else:
            raise ValueError(f"unknown mask format {fmt!r}")
        return path

    @classmethod
    def read(cls, path: str | Path) -> Mask:
        path = Path(path)
        blob = path.read_bytes()
        if blob[:4] == MASK_MAGIC:
            return cls.from_bytes(blob)
        return cls.from_csv(blob.decode("utf-8"))


def generate_mask(
    g: AttributedGraph, spec: MechanismSpec, profile: StructuralProfile | None = None
) -> Mask:
    """Build the driver, calibrate the bias and sample a mask from ``spec.seed``."""
    driver = build_driver(g, profile, spec)
    calib = calibrate_bias(driver, spec)
    prob = missing_probabilities(driver, spec, calib.bias)
    rng = np.random.default_rng(int(spec.seed))
    missing = rng.random(prob.shape) < prob
    observed = np.ones((g.num_nodes, g.num_features), dtype=bool)
    missable = list(driver.column_split.missable_columns)
    observed[:, missable] = ~missing
    info = {
        "graph": g.name,
        "probability_min": float(prob.min()),
        "probability_max": float(prob.max()),
        "probability_mean": float(prob.mean()),
        "constant_driver_columns": int(driver.constant_driver.sum()),
    }
    return Mask(observed, driver.column_split, spec, calib, info)


def empirical_rate(mask: Mask) -> float:
    """Fraction of missing entries among the missable ones."""
    cols = list(mask.column_split.missable_columns)
    if not cols or mask.shape[0] == 0:
        return 0.0
    block = mask.observed[:, cols]
    return float(block.size - np.count_nonzero(block)) / block.size
