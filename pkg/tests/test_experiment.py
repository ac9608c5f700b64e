import json
import math
import shutil
from pathlib import Path

import numpy as np
import pytest

from gamm.errors import ConfigError
from gamm.experiment import (
    ExperimentConfig,
    build_report,
    default_observed_columns,
    enumerate_tuples,
    run_experiment,
)
from gamm.maskgen import Mask, MechanismSpec, derive_seed

PLUGINS = Path(__file__).parent / "plugins"
SYNTH = {"name": "toy", "synth": {"num_nodes": 200, "num_features": 5, "seed": 1}}


def config(tmp_path, **kw):
    data = {"datasets": [SYNTH], "repetitions": 2, "p_miss": [0.3], "seed": 5, "out": str(tmp_path / "out")}
    data.update(kw)
    return ExperimentConfig.from_dict(data)


def test_smallest_sweep(tmp_path):
    cfg = config(tmp_path, mechanisms=["MCAR"], imputers=["tabular_mean"], comparisons=[["MCAR", "MCAR"]])
    summary = run_experiment(cfg)
    assert summary.computed == 2 and summary.exit_code == 0
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert len(report["samples"]) == 2
    assert list(report["comparisons"]) == ["MCAR_vs_MCAR", "MCAR_vs_MCAR_rmse"]
    assert (tmp_path / "out" / "tables" / "MCAR_vs_MCAR.csv").is_file()


def test_defaults():
    cfg = ExperimentConfig.from_dict({"datasets": [SYNTH]})
    assert cfg.p_miss == [0.2, 0.5, 0.8]
    assert cfg.repetitions == 8
    assert [m.label for m in cfg.mechanisms] == ["MCAR", "A_MAR", "A_MNAR", "S_MAR", "N_MAR", "N_MNAR"]
    assert cfg.families() == [("A_MAR", "N_MAR"), ("A_MNAR", "N_MNAR")]
    assert default_observed_columns(16, 0.1) == (0, 1)
    assert default_observed_columns(3, 0.1) == (0,)


def test_tuple_count_closed_form(tmp_path):
    datasets = [{"name": f"g{k}", "synth": {"num_nodes": 20, "num_features": 3, "seed": k}} for k in range(12)]
    cfg = config(
        tmp_path,
        datasets=datasets,
        mechanisms=["A_MAR", "N_MAR", "A_MNAR", "N_MNAR"],
        p_miss=[0.2, 0.5, 0.8],
        imputers=["tabular_mean", "graph_average", "feature_propagation"],
        repetitions=8,
    )
    assert cfg.tuple_count() == 12 * 4 * 3 * 3 * 8
    assert len(enumerate_tuples(cfg)) * len(cfg.imputers) == cfg.tuple_count()


@pytest.mark.parametrize(
    "override, message",
    [
        ({"repetitions": 0}, "repetitions"),
        ({"p_miss": [0.0]}, "p_miss"),
        ({"p_miss": [0.2, 0.2]}, "distinct"),
        ({"imputers": ["external:/no/such/plugin"]}, "does not exist"),
        ({"imputers": ["knn"]}, "unknown imputer"),
        ({"datasets": []}, "dataset"),
        ({"datasets": [{"path": "/no/such/dir"}]}, "not found"),
        ({"mechanisms": ["MCAR"], "comparisons": [["MCAR", "N_MNAR"]]}, "unknown mechanism"),
        ({"mechanisms": [{"kind": "MCAR", "bogus": 1}]}, "unknown mechanism options"),
        ({"frobnicate": 1}, "unknown config keys"),
    ],
)
def test_config_validation(tmp_path, override, message):
    with pytest.raises(ConfigError, match=message):
        config(tmp_path, **override)


def test_config_load_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(bad)


def test_mechanism_overrides_and_seeds(tmp_path):
    cfg = config(
        tmp_path,
        mechanisms=[{"kind": "N_MNAR", "label": "N_MNAR_h2", "hops": 2, "omega": 1.5}, "A_MAR"],
        imputers=["tabular_mean"],
    )
    run_experiment(cfg)
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    entry = manifest["mask_tuples"][0]
    assert entry["mechanism"] == "N_MNAR_h2"
    assert entry["spec"]["hops"] == 2 and entry["spec"]["omega"] == 1.5
    assert entry["seed"] == derive_seed(5, 0, 0, 0, 0)
    a_mar = [t for t in manifest["mask_tuples"] if t["mechanism"] == "A_MAR"][0]
    assert a_mar["spec"]["observed_columns"] == [0]
    assert manifest["tuple_count"] == 1 * 2 * 1 * 1 * 2


def test_determinism_and_thread_independence(tmp_path):
    kw = dict(mechanisms=["MCAR", "A_MNAR", "N_MNAR"], save_masks=True)
    a = config(tmp_path / "a", jobs=1, **kw)
    b = config(tmp_path / "b", jobs=4, **kw)
    run_experiment(a)
    run_experiment(b)
    ra, rb = tmp_path / "a" / "out", tmp_path / "b" / "out"
    strip = lambda r: {k: v for k, v in json.loads(r.read_text()).items() if k != "config"}
    assert strip(ra / "report.json") == strip(rb / "report.json")
    for mask in sorted((ra / "masks").iterdir()):
        assert mask.read_bytes() == (rb / "masks" / mask.name).read_bytes()
    for table in sorted((ra / "tables").iterdir()):
        assert table.read_bytes() == (rb / "tables" / table.name).read_bytes()
    for dens in sorted((ra / "density").rglob("*.csv")):
        assert dens.read_bytes() == (rb / dens.relative_to(ra)).read_bytes()


def test_resume_recomputes_only_report(tmp_path):
    cfg = config(tmp_path, mechanisms=["A_MNAR", "N_MNAR"])
    first = run_experiment(cfg)
    out = tmp_path / "out"
    original = (out / "report.json").read_bytes()
    stamps = {p: p.stat().st_mtime_ns for p in (out / "runs").iterdir()}
    (out / "report.json").unlink()
    shutil.rmtree(out / "tables")
    second = run_experiment(cfg)
    assert second.computed == 0 and second.reused == first.computed
    assert (out / "report.json").read_bytes() == original
    assert {p: p.stat().st_mtime_ns for p in (out / "runs").iterdir()} == stamps
    assert build_report(out) == json.loads(original)


def test_resume_after_partial_loss(tmp_path):
    cfg = config(tmp_path, mechanisms=["MCAR"], imputers=["feature_propagation"])
    run_experiment(cfg)
    out = tmp_path / "out"
    original = (out / "report.json").read_bytes()
    victim = sorted((out / "runs").iterdir())[0]
    victim.unlink()
    summary = run_experiment(cfg)
    assert summary.computed == 1
    assert (out / "report.json").read_bytes() == original


def test_plugin_failure_is_recorded(tmp_path):
    cfg = config(
        tmp_path,
        mechanisms=["MCAR"],
        imputers=["tabular_mean", f"external:{PLUGINS / 'tamper.py'}"],
    )
    summary = run_experiment(cfg)
    assert summary.exit_code == 4
    assert len(summary.failures) == 2
    assert all("altered" in f["error"] for f in summary.failures)
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert len(report["samples"]) == 2
    assert len(report["failures"]) == 2


def test_plugin_in_sweep_matches_builtin(tmp_path):
    cfg = config(
        tmp_path,
        mechanisms=["MCAR"],
        imputers=["tabular_mean", f"external:{PLUGINS / 'column_mean.py'}"],
    )
    assert run_experiment(cfg).exit_code == 0
    samples = json.loads((tmp_path / "out" / "report.json").read_text())["samples"]
    by_imp = {}
    for s in samples:
        by_imp.setdefault(s["imputer"], []).append(s["mae"])
    assert np.allclose(by_imp["tabular_mean"], by_imp["external:column_mean.py"], rtol=1e-14)


def test_density_exports(tmp_path):
    cfg = config(tmp_path, mechanisms=["MCAR", "A_MAR"], density={"features": [0, 1, 4], "grid_size": 64})
    run_experiment(cfg)
    root = tmp_path / "out" / "density" / "toy"
    assert sorted(p.name for p in (root / "MCAR").iterdir()) == ["0.csv", "1.csv", "4.csv"]
    # column 0 is never masked under A_MAR, so it gets no density file
    assert sorted(p.name for p in (root / "A_MAR").iterdir()) == ["1.csv", "4.csv"]
    header = (root / "MCAR" / "1.csv").read_text().splitlines()[0]
    assert header == "x,truth_density,tabular_mean,graph_average,feature_propagation"
    assert len((root / "MCAR" / "1.csv").read_text().splitlines()) == 65


def test_saved_masks_match_manifest_specs(tmp_path):
    cfg = config(tmp_path, mechanisms=["S_MAR"], save_masks=True, imputers=["tabular_mean"])
    run_experiment(cfg)
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    for t in manifest["mask_tuples"]:
        mask = Mask.read(tmp_path / "out" / "masks" / f"{t['id']}.gamm")
        assert mask.spec == MechanismSpec.from_dict(t["spec"])
