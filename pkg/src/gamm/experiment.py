"""Sweep driver: dataset x mechanism x rate x repetition x imputer.

Layout of an output directory::

    config.json          resolved configuration
    manifest.json        grid sizes and, per mask tuple, its seed and spec
    runs/<tuple>__<imputer>.json   one metric sample per file
    failures/<tuple>__<imputer>.json
    masks/<tuple>.gamm   only with save_masks
    density/<dataset>/<mechanism>/<feature>.csv
    report.json, tables/<family>.csv, tables/<family>_rmse.csv
    timings.json         wall times (kept out of report.json)

Every mask tuple ``(dataset d, mechanism m, rate r, repetition k)`` samples
its mask from ``derive_seed(seed, d, m, r, k)`` using the indices of the
entries in the configuration lists.
"""

from __future__ import annotations

import json
import logging
import math
import re
import threading
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from gamm.errors import ConfigError, GammError, SpecError
from gamm.evaluation import MetricSample, OutcomeSummary, build_comparison_table, masked_mae_rmse
from gamm.graph import AttributedGraph, load_graph, structural_profile
from gamm.imputers import ImputerConfig, ImputerMethod, impute
from gamm.maskgen import MechanismKind, MechanismSpec, derive_seed, generate_mask
from gamm.stats import kde_export
from gamm.synth import SynthSpec, generate_sbm

logger = logging.getLogger(__name__)

DEFAULT_MECHANISMS = ["MCAR", "A_MAR", "A_MNAR", "S_MAR", "N_MAR", "N_MNAR"]
DEFAULT_IMPUTERS = ["tabular_mean", "graph_average", "feature_propagation"]
DEFAULT_FAMILIES = [("A_MAR", "N_MAR"), ("A_MNAR", "N_MNAR")]
MECHANISM_OVERRIDES = {"omega", "sign", "hops", "g_weights", "observed_columns", "driver_column"}


@dataclass(frozen=True)
class DatasetEntry:
    name: str
    path: str | None = None
    synth: SynthSpec | None = None

    def load(self) -> AttributedGraph:
        if self.synth is not None:
            return generate_sbm(self.synth)
        return load_graph(self.path)

    def to_dict(self) -> dict:
        out = {"name": self.name}
        if self.path is not None:
            out["path"] = self.path
        if self.synth is not None:
            out["synth"] = self.synth.to_dict()
        return out


@dataclass(frozen=True)
class MechanismEntry:
    label: str
    kind: MechanismKind
    overrides: dict = field(default_factory=dict)

    def spec_for(self, g: AttributedGraph, p_miss: float, seed: int, observed_fraction: float) -> MechanismSpec:
        params = dict(self.overrides)
        if "observed_columns" not in params:
            params["observed_columns"] = (
                default_observed_columns(g.num_features, observed_fraction)
                if self.kind.needs_observed_columns
                else ()
            )
        return MechanismSpec(kind=self.kind, p_miss=p_miss, seed=seed, **params)

    def to_dict(self) -> dict:
        return {"label": self.label, "kind": self.kind.value, **self.overrides}


def default_observed_columns(num_features: int, fraction: float) -> tuple[int, ...]:
    """First ``ceil(fraction * d)`` columns (at least one, at most d - 1)."""
    k = min(max(1, math.ceil(fraction * num_features)), max(num_features - 1, 0))
    return tuple(range(k))


@dataclass
class ExperimentConfig:
    datasets: list[DatasetEntry]
    mechanisms: list[MechanismEntry] = field(
        default_factory=lambda: [MechanismEntry(k, MechanismKind(k)) for k in DEFAULT_MECHANISMS]
    )
    p_miss: list[float] = field(default_factory=lambda: [0.2, 0.5, 0.8])
    imputers: list[str] = field(default_factory=lambda: list(DEFAULT_IMPUTERS))
    repetitions: int = 8
    seed: int = 0
    out: str = "gamm-out"
    jobs: int = 1
    observed_fraction: float = 0.1
    comparisons: list[tuple[str, str]] | None = None
    save_masks: bool = False
    density: dict = field(default_factory=dict)
    fp_max_iters: int = 40
    fp_tol: float = 1e-6
    plugin_timeout: float = 600.0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if not self.datasets:
            raise ConfigError("at least one dataset is required")
        names = [d.name for d in self.datasets]
        if len(set(names)) != len(names):
            raise ConfigError("dataset names must be unique")
        labels = [m.label for m in self.mechanisms]
        if not labels or len(set(labels)) != len(labels):
            raise ConfigError("mechanism labels must be unique and non-empty")
        if not self.p_miss or not all(0.0 < float(p) < 1.0 for p in self.p_miss):
            raise ConfigError("p_miss values must lie in (0, 1)")
        if len(set(self.p_miss)) != len(self.p_miss):
            raise ConfigError("p_miss values must be distinct")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if not 0.0 <= self.observed_fraction < 1.0:
            raise ConfigError("observed_fraction must lie in [0, 1)")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if not self.imputers:
            raise ConfigError("at least one imputer is required")
        for text in self.imputers:
            try:
                cfg = ImputerConfig.parse(text)
            except SpecError as exc:
                raise ConfigError(str(exc)) from None
            if cfg.method is ImputerMethod.EXTERNAL and not Path(cfg.command).is_file():
                raise ConfigError(f"plugin {cfg.command} does not exist")
        if len({self.imputer_config(t).label for t in self.imputers}) != len(self.imputers):
            raise ConfigError("imputer labels must be unique")
        for d in self.datasets:
            if d.synth is None and (d.path is None or not Path(d.path).is_dir()):
                raise ConfigError(f"dataset {d.name!r}: directory {d.path!r} not found")
        for a, b in self.families():
            if a not in labels or b not in labels:
                raise ConfigError(f"comparison {a} vs {b} references an unknown mechanism")
        unknown = set(self.density) - {"enabled", "features", "p_miss", "repetition", "grid_size"}
        if unknown:
            raise ConfigError(f"unknown density options {sorted(unknown)}")

    def families(self) -> list[tuple[str, str]]:
        if self.comparisons is not None:
            return [tuple(c) for c in self.comparisons]
        labels = {m.label for m in self.mechanisms}
        return [f for f in DEFAULT_FAMILIES if f[0] in labels and f[1] in labels]

    def imputer_config(self, text: str) -> ImputerConfig:
        return ImputerConfig.parse(
            text, max_iters=self.fp_max_iters, convergence_tol=self.fp_tol, timeout=self.plugin_timeout
        )

    @property
    def density_settings(self) -> dict:
        return {
            "enabled": bool(self.density.get("enabled", True)),
            "features": self.density.get("features"),
            "p_miss": float(self.density.get("p_miss", self.p_miss[0])),
            "repetition": int(self.density.get("repetition", 0)),
            "grid_size": int(self.density.get("grid_size", 256)),
        }

    def tuple_count(self) -> int:
        return len(self.datasets) * len(self.mechanisms) * len(self.p_miss) * len(self.imputers) * self.repetitions

    def to_dict(self) -> dict:
        return {
            "datasets": [d.to_dict() for d in self.datasets],
            "mechanisms": [m.to_dict() for m in self.mechanisms],
            "p_miss": [float(p) for p in self.p_miss],
            "imputers": list(self.imputers),
            "repetitions": self.repetitions,
            "seed": int(self.seed),
            "out": str(self.out),
            "jobs": self.jobs,
            "observed_fraction": self.observed_fraction,
            "comparisons": [list(c) for c in self.comparisons] if self.comparisons is not None else None,
            "save_masks": self.save_masks,
            "density": dict(self.density),
            "fp_max_iters": self.fp_max_iters,
            "fp_tol": self.fp_tol,
            "plugin_timeout": self.plugin_timeout,
        }

    @classmethod
    def from_dict(cls, data: dict, base_dir: str | Path | None = None) -> ExperimentConfig:
        data = dict(data)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            data["datasets"] = [_parse_dataset(d, base_dir) for d in data.get("datasets", [])]
            if "mechanisms" in data:
                data["mechanisms"] = [_parse_mechanism(m) for m in data["mechanisms"]]
            if data.get("comparisons") is not None:
                data["comparisons"] = [tuple(c) for c in data["comparisons"]]
            return cls(**data)
        except (TypeError, SpecError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(data, base_dir=path.parent)


def _parse_dataset(entry, base_dir) -> DatasetEntry:
    if isinstance(entry, str):
        entry = {"path": entry}
    if "synth" in entry:
        spec = SynthSpec.from_dict(entry["synth"])
        return DatasetEntry(entry.get("name", spec.name), synth=spec)
    if "path" not in entry:
        raise ConfigError("dataset entries need a 'path' or a 'synth' block")
    path = Path(entry["path"])
    if base_dir is not None and not path.is_absolute():
        path = Path(base_dir) / path
    return DatasetEntry(entry.get("name", path.name), path=str(path))


def _parse_mechanism(entry) -> MechanismEntry:
    if isinstance(entry, str):
        kind = MechanismKind.parse(entry)
        return MechanismEntry(kind.value, kind)
    entry = dict(entry)
    kind = MechanismKind.parse(entry.pop("kind"))
    label = entry.pop("label", kind.value)
    unknown = set(entry) - MECHANISM_OVERRIDES
    if unknown:
        raise ConfigError(f"unknown mechanism options {sorted(unknown)}")
    return MechanismEntry(label, kind, entry)


# --- running ----------------------------------------------------------------


@dataclass(frozen=True)
class MaskTuple:
    index: tuple[int, int, int, int]
    dataset: str
    mechanism: str
    p_miss: float
    repetition: int
    seed: int

    @property
    def tuple_id(self) -> str:
        d, m, r, k = self.index
        return f"d{d:03d}-m{m:02d}-r{r:02d}-k{k:03d}"


@dataclass
class RunSummary:
    out_dir: Path
    computed: int = 0
    reused: int = 0
    failures: list[dict] = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        return 4 if self.failures else 0


def _safe(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", label)


def enumerate_tuples(cfg: ExperimentConfig) -> list[MaskTuple]:
    out = []
    for di, d in enumerate(cfg.datasets):
        for mi, m in enumerate(cfg.mechanisms):
            for ri, p in enumerate(cfg.p_miss):
                for k in range(cfg.repetitions):
                    seed = derive_seed(cfg.seed, di, mi, ri, k)
                    out.append(MaskTuple((di, mi, ri, k), d.name, m.label, float(p), k, seed))
    return out


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


class _Runner:
    def __init__(self, cfg: ExperimentConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self.graphs: dict[str, AttributedGraph] = {}
        self.profiles = {}
        self.lock = threading.Lock()
        self.summary = RunSummary(out)
        self.imputers = [cfg.imputer_config(t) for t in cfg.imputers]
        self.mechanisms = {m.label: m for m in cfg.mechanisms}

    def spec(self, t: MaskTuple) -> MechanismSpec:
        g = self.graphs[t.dataset]
        return self.mechanisms[t.mechanism].spec_for(g, t.p_miss, t.seed, self.cfg.observed_fraction)

    def run_file(self, t: MaskTuple, imputer: ImputerConfig) -> Path:
        return self.out / "runs" / f"{t.tuple_id}__{_safe(imputer.label)}.json"

    def failure_file(self, t: MaskTuple, imputer: ImputerConfig) -> Path:
        return self.out / "failures" / f"{t.tuple_id}__{_safe(imputer.label)}.json"

    def density_targets(self, t: MaskTuple, spec: MechanismSpec) -> list[tuple[int, Path]]:
        ds = self.cfg.density_settings
        if not ds["enabled"] or t.p_miss != ds["p_miss"] or t.repetition != ds["repetition"]:
            return []
        g = self.graphs[t.dataset]
        missable = [c for c in range(g.num_features) if c not in set(spec.observed_columns)]
        features = ds["features"] if ds["features"] is not None else missable[:3]
        root = self.out / "density" / _safe(t.dataset) / _safe(t.mechanism)
        return [(int(j), root / f"{int(j)}.csv") for j in features if int(j) in missable]

    def process(self, t: MaskTuple) -> None:
        try:
            spec = self.spec(t)
        except GammError as exc:
            for imp in self.imputers:
                self.fail(t, imp, exc)
            return
        pending = [imp for imp in self.imputers if not self.run_file(t, imp).is_file()]
        density = [(j, p) for j, p in self.density_targets(t, spec) if not p.is_file()]
        with self.lock:
            self.summary.reused += len(self.imputers) - len(pending)
        mask_path = self.out / "masks" / f"{t.tuple_id}.gamm"
        need_mask_file = self.cfg.save_masks and not mask_path.is_file()
        if not pending and not density and not need_mask_file:
            return
        g = self.graphs[t.dataset]
        try:
            mask = generate_mask(g, spec, self.profiles[t.dataset])
        except GammError as exc:
            for imp in pending:
                self.fail(t, imp, exc)
            return
        if need_mask_file:
            mask_path.parent.mkdir(parents=True, exist_ok=True)
            mask.write(mask_path)
        imputed = {}
        for imp in self.imputers:
            if imp not in pending and not density:
                continue
            try:
                res = impute(imp, g, g.features, mask.observed, spec.to_dict())
                mae, rmse = masked_mae_rmse(g.features, res.values, mask.observed)
                sample = MetricSample(t.dataset, t.mechanism, t.p_miss, imp.label, t.repetition, t.seed, mae, rmse)
            except Exception as exc:  # per-tuple failures must not abort the sweep
                if imp in pending:
                    self.fail(t, imp, exc)
                continue
            imputed[imp.label] = res.values
            if imp in pending:
                payload = {
                    "sample": sample.to_dict(),
                    "tuple": t.tuple_id,
                    "iterations": res.iterations,
                    "wall_time": res.wall_time,
                    "empirical_missing": mask.num_missing,
                }
                _write_json(self.run_file(t, imp), payload)
                self.failure_file(t, imp).unlink(missing_ok=True)
                with self.lock:
                    self.summary.computed += 1
        for j, path in density:
            sources = {"truth": g.features[:, j]}
            sources.update({label: vals[:, j] for label, vals in imputed.items()})
            export = kde_export(sources, self.cfg.density_settings["grid_size"], feature=j)
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(export.to_csv())

    def fail(self, t: MaskTuple, imp: ImputerConfig, exc: BaseException) -> None:
        logger.warning("tuple %s / %s failed: %s", t.tuple_id, imp.label, exc)
        record = {
            "tuple": t.tuple_id,
            "dataset": t.dataset,
            "mechanism": t.mechanism,
            "p_miss": t.p_miss,
            "repetition": t.repetition,
            "imputer": imp.label,
            "error": f"{type(exc).__name__}: {exc}",
            "traceback": "".join(traceback.format_exception(type(exc), exc, exc.__traceback__))[-4000:],
        }
        _write_json(self.failure_file(t, imp), record)


def write_manifest(cfg: ExperimentConfig, tuples: list[MaskTuple], specs: dict[str, dict], out: Path) -> None:
    grid = {
        "datasets": [d.name for d in cfg.datasets],
        "mechanisms": [m.label for m in cfg.mechanisms],
        "p_miss": [float(p) for p in cfg.p_miss],
        "imputers": [cfg.imputer_config(t).label for t in cfg.imputers],
        "repetitions": cfg.repetitions,
    }
    manifest = {
        "master_seed": int(cfg.seed),
        "seed_derivation": "SeedSequence(entropy=master_seed, spawn_key=(dataset, mechanism, rate, repetition)) -> uint64",
        "grid": grid,
        "tuple_count": cfg.tuple_count(),
        "tuple_count_formula": (
            f"{len(grid['datasets'])} datasets x {len(grid['mechanisms'])} mechanisms x "
            f"{len(grid['p_miss'])} rates x {len(grid['imputers'])} imputers x {cfg.repetitions} repetitions"
        ),
        "mask_tuples": [
            {
                "id": t.tuple_id,
                "index": list(t.index),
                "dataset": t.dataset,
                "mechanism": t.mechanism,
                "p_miss": t.p_miss,
                "repetition": t.repetition,
                "seed": t.seed,
                "spec": specs.get(t.tuple_id),
            }
            for t in tuples
        ],
    }
    _write_json(out / "manifest.json", manifest)


def run_experiment(cfg: ExperimentConfig) -> RunSummary:
    """Run (or resume) a sweep and write the report; returns what was computed."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_dict())
    runner = _Runner(cfg, out)
    for d in cfg.datasets:
        g = d.load()
        runner.graphs[d.name] = g
        runner.profiles[d.name] = structural_profile(g)
    tuples = enumerate_tuples(cfg)
    specs = {}
    for t in tuples:
        try:
            specs[t.tuple_id] = runner.spec(t).to_dict()
        except GammError:
            specs[t.tuple_id] = None
    write_manifest(cfg, tuples, specs, out)

    if cfg.jobs == 1:
        for t in tuples:
            runner.process(t)
    else:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            list(pool.map(runner.process, tuples))
    build_report(out, cfg)
    runner.summary.failures = _read_failures(out)
    return runner.summary


def _read_failures(out: Path) -> list[dict]:
    return [json.loads(p.read_text()) for p in sorted((out / "failures").glob("*.json"))]


def load_samples(out: Path) -> tuple[list[MetricSample], dict[str, float]]:
    samples, timings = [], {}
    for path in sorted((Path(out) / "runs").glob("*.json")):
        payload = json.loads(path.read_text())
        samples.append(MetricSample(**payload["sample"]))
        timings[path.stem] = payload.get("wall_time", 0.0)
    samples.sort(key=lambda s: (s.dataset, s.mechanism, s.p_miss, s.imputer, s.repetition))
    return samples, timings


def build_report(out: str | Path, cfg: ExperimentConfig | None = None) -> dict:
    """Assemble report.json and comparison tables from the stored per-tuple files."""
    out = Path(out)
    if cfg is None:
        cfg = ExperimentConfig.from_dict(json.loads((out / "config.json").read_text()))
    samples, timings = load_samples(out)
    failures = _read_failures(out)
    tables = {}
    overall = {}
    for metric in ("mae", "rmse"):
        summary = OutcomeSummary()
        for fam in cfg.families():
            table = build_comparison_table(samples, fam, metric=metric)
            suffix = "" if metric == "mae" else "_rmse"
            tables[table.name + suffix] = table
            summary.merge(table.summary)
        overall[metric] = summary.to_dict()
    (out / "tables").mkdir(exist_ok=True)
    for name, table in tables.items():
        (out / "tables" / f"{name}.csv").write_text(table.to_csv())
    report = {
        "config": cfg.to_dict(),
        "tuple_count": cfg.tuple_count(),
        "samples": [s.to_dict() for s in samples],
        "failures": [{k: v for k, v in f.items() if k != "traceback"} for f in failures],
        "comparisons": {name: t.to_dict() for name, t in sorted(tables.items())},
        "outcome_summary": overall,
    }
    _write_json(out / "report.json", report)
    _write_json(out / "timings.json", timings)
    return report
