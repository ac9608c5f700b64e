"""Command-line entry point: ``gamm <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from gamm.errors import ConfigError, GammError, GraphFormatError
from gamm.evaluation import masked_mae_rmse
from gamm.experiment import ExperimentConfig, build_report, run_experiment
from gamm.graph import adjusted_homophily, format_row, load_graph, save_graph
from gamm.imputers import ImputerConfig, impute
from gamm.maskgen import Mask, MechanismSpec, empirical_rate, generate_mask
from gamm.synth import SynthSpec, generate_sbm

logger = logging.getLogger("gamm")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DATASET, EXIT_PARTIAL = 0, 1, 2, 3, 4


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _mechanism_spec(args) -> MechanismSpec:
    if args.spec:
        data = json.loads(Path(args.spec).read_text())
    else:
        if not args.mechanism or args.p_miss is None:
            raise ConfigError("either --spec or both --mechanism and --p-miss are required")
        data = {"kind": args.mechanism, "p_miss": args.p_miss}
    for key in ("hops", "omega", "sign", "seed", "driver_column"):
        value = getattr(args, key)
        if value is not None:
            data[key] = value
    if args.observed_columns is not None:
        data["observed_columns"] = _int_list(args.observed_columns)
    if args.g_weights is not None:
        data["g_weights"] = _float_list(args.g_weights)
    return MechanismSpec.from_dict(data)


def cmd_mask(args) -> int:
    g = load_graph(args.dataset)
    spec = _mechanism_spec(args)
    mask = generate_mask(g, spec)
    path = mask.write(args.out, args.format)
    print(f"wrote {path}")
    print(f"target rate    {spec.p_miss:.6f}")
    print(f"expected rate  {mask.calibration.achieved_expected_rate:.12f}")
    print(f"achieved rate  {empirical_rate(mask):.6f} ({mask.num_missing} missing entries)")
    return EXIT_OK


def _read_mask(path: str, g) -> Mask:
    mask = Mask.read(path)
    if mask.shape != (g.num_nodes, g.num_features):
        raise ConfigError(f"mask shape {mask.shape} does not match dataset {(g.num_nodes, g.num_features)}")
    return mask


def cmd_impute(args) -> int:
    g = load_graph(args.dataset)
    mask = _read_mask(args.mask, g)
    cfg = ImputerConfig.parse(args.imputer, max_iters=args.max_iters, convergence_tol=args.tol, timeout=args.timeout)
    spec = mask.spec.to_dict() if mask.spec is not None else None
    res = impute(cfg, g, g.features, mask.observed, spec)
    with open(args.out, "w") as fh:
        for row in res.values.tolist():
            fh.write(format_row(row) + "\n")
    print(f"wrote {args.out} ({res.method}, {res.iterations} iterations)")
    return EXIT_OK


def cmd_eval(args) -> int:
    g = load_graph(args.dataset)
    mask = _read_mask(args.mask, g)
    try:
        imputed = np.loadtxt(args.imputed, delimiter=",", dtype=np.float64, ndmin=2)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read {args.imputed}: {exc}") from None
    mae, rmse = masked_mae_rmse(g.features, imputed, mask.observed)
    print(json.dumps({"mae": mae, "rmse": rmse, "missing_entries": mask.num_missing}, sort_keys=True))
    return EXIT_OK


def cmd_synth(args) -> int:
    data = json.loads(Path(args.spec).read_text()) if args.spec else {}
    for key in SynthSpec.__dataclass_fields__:
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    g = generate_sbm(SynthSpec.from_dict(data))
    save_graph(g, args.out)
    print(f"wrote {args.out}: n={g.num_nodes} edges={g.num_edges} d={g.num_features} H_adj={adjusted_homophily(g):.6f}")
    return EXIT_OK


def cmd_info(args) -> int:
    g = load_graph(args.dataset)
    info = {"name": g.name, "nodes": g.num_nodes, "edges": g.num_edges, "features": g.num_features}
    if g.labels is not None:
        info["classes"] = int(np.unique(g.labels).size)
        try:
            info["adjusted_homophily"] = adjusted_homophily(g)
        except GammError as exc:
            info["adjusted_homophily"] = None
            logger.warning("%s", exc)
    print(json.dumps(info, indent=2, sort_keys=True))
    return EXIT_OK


def _apply_run_overrides(data: dict, args) -> dict:
    if args.dataset:
        data["datasets"] = list(args.dataset)
    if args.p_miss is not None:
        data["p_miss"] = _float_list(args.p_miss)
    if args.reps is not None:
        data["repetitions"] = args.reps
    if args.seed is not None:
        data["seed"] = args.seed
    if args.out is not None:
        data["out"] = args.out
    if args.jobs is not None:
        data["jobs"] = args.jobs
    if args.imputer:
        data["imputers"] = list(args.imputer)
    if args.mechanism:
        data["mechanisms"] = list(args.mechanism)
    return data


def cmd_run(args) -> int:
    base_dir = None
    data: dict = {}
    if args.config:
        path = Path(args.config)
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        base_dir = path.parent
    data = _apply_run_overrides(data, args)
    cfg = ExperimentConfig.from_dict(data, base_dir=base_dir)
    summary = run_experiment(cfg)
    print(
        f"{cfg.tuple_count()} tuples: {summary.computed} computed, {summary.reused} reused, "
        f"{len(summary.failures)} failed; report at {Path(cfg.out) / 'report.json'}"
    )
    return summary.exit_code


def cmd_report(args) -> int:
    out = Path(args.out_dir)
    if not (out / "config.json").is_file():
        raise ConfigError(f"{out} has no config.json; not an experiment directory")
    report = build_report(out)
    print(f"rebuilt {out / 'report.json'} from {len(report['samples'])} samples")
    return EXIT_PARTIAL if report["failures"] else EXIT_OK


def _add_spec_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mechanism", help="mechanism kind, e.g. MCAR, A_MNAR, N_MAR")
    p.add_argument("--p-miss", type=float, dest="p_miss")
    p.add_argument("--spec", help="mechanism spec JSON (flags override its fields)")
    p.add_argument("--seed", type=int)
    p.add_argument("--hops", type=int)
    p.add_argument("--omega", type=float)
    p.add_argument("--sign", choices=["positive", "negative"])
    p.add_argument("--observed-columns", dest="observed_columns", help="comma-separated column ids")
    p.add_argument("--g-weights", dest="g_weights", help="w_A,w_S,w_N for G_MAR / G_MNAR")
    p.add_argument("--driver-column", dest="driver_column", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gamm", description="Graph-aware missingness benchmarking.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run or resume a full sweep")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--dataset", action="append", help="dataset directory (repeatable)")
    p.add_argument("--p-miss", dest="p_miss", help="comma-separated missing rates")
    p.add_argument("--reps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--jobs", type=int)
    p.add_argument("--imputer", action="append", help="imputer name or external:<path> (repeatable)")
    p.add_argument("--mechanism", action="append", help="mechanism kind (repeatable)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("mask", help="generate one mask")
    p.add_argument("dataset")
    _add_spec_args(p)
    p.add_argument("--out", default="mask.gamm")
    p.add_argument("--format", choices=["binary", "csv"], default="binary")
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("impute", help="impute a dataset under a mask")
    p.add_argument("dataset")
    p.add_argument("--mask", required=True)
    p.add_argument("--imputer", default="feature_propagation")
    p.add_argument("--out", default="imputed.csv")
    p.add_argument("--max-iters", dest="max_iters", type=int, default=40)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--timeout", type=float, default=600.0)
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("eval", help="masked MAE / RMSE of an imputation")
    p.add_argument("dataset")
    p.add_argument("--mask", required=True)
    p.add_argument("--imputed", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write an SBM dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--spec", help="synth spec JSON (flags override its fields)")
    p.add_argument("--nodes", dest="num_nodes", type=int)
    p.add_argument("--blocks", dest="num_blocks", type=int)
    p.add_argument("--p-in", dest="p_in", type=float)
    p.add_argument("--p-out", dest="p_out", type=float)
    p.add_argument("--class-shift", dest="class_shift", type=float)
    p.add_argument("--features", dest="num_features", type=int)
    p.add_argument("--noise-sd", dest="noise_sd", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--shift-pattern", dest="shift_pattern", choices=["permuted", "aligned"])
    p.add_argument("--name")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("report", help="rebuild report and tables from stored samples")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("info", help="dataset summary including adjusted homophily")
    p.add_argument("dataset")
    p.set_defaults(func=cmd_info)
    return parser


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("GAMM_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except GraphFormatError as exc:
        print(f"gamm: dataset error: {exc}", file=sys.stderr)
        return EXIT_DATASET
    except (ConfigError, GammError, json.JSONDecodeError) as exc:
        print(f"gamm: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"gamm: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
