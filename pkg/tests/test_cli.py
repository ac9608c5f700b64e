import json
import subprocess
import sys

import pytest

from gamm.cli import main
from gamm.maskgen import Mask

DATA = {"num_nodes": 150, "num_features": 4, "seed": 2}


@pytest.fixture
def dataset(tmp_path):
    root = tmp_path / "ds"
    assert main(["synth", "--out", str(root), "--nodes", "150", "--features", "4", "--seed", "2"]) == 0
    return root


def test_mask_impute_eval_pipeline(dataset, tmp_path, capsys):
    mask = tmp_path / "m.gamm"
    assert main(["mask", str(dataset), "--mechanism", "MCAR", "--p-miss", "0.5", "--seed", "7", "--out", str(mask)]) == 0
    out = capsys.readouterr().out
    assert "achieved rate" in out
    m = Mask.read(mask)
    assert m.spec.seed == 7 and m.shape == (150, 4)
    imputed = tmp_path / "imp.csv"
    assert main(["impute", str(dataset), "--mask", str(mask), "--imputer", "graph_average", "--out", str(imputed)]) == 0
    capsys.readouterr()
    assert main(["eval", str(dataset), "--mask", str(mask), "--imputed", str(imputed)]) == 0
    metrics = json.loads(capsys.readouterr().out)
    assert metrics["missing_entries"] == m.num_missing
    assert metrics["rmse"] >= metrics["mae"] > 0


def test_eval_identical_truth(dataset, tmp_path, capsys):
    mask = tmp_path / "m.gamm"
    main(["mask", str(dataset), "--mechanism", "MCAR", "--p-miss", "0.3", "--out", str(mask)])
    truth = tmp_path / "truth.csv"
    truth.write_text((dataset / "features.csv").read_text())
    capsys.readouterr()
    assert main(["eval", str(dataset), "--mask", str(mask), "--imputed", str(truth)]) == 0
    assert json.loads(capsys.readouterr().out)["mae"] == 0.0
    full = tmp_path / "full.csv"
    full.write_text("".join("1,1,1,1\n" for _ in range(150)))
    assert main(["eval", str(dataset), "--mask", str(full), "--imputed", str(truth)]) == 2
    assert "no missing entries" in capsys.readouterr().err


def test_compose_equals_monolith(tmp_path, capsys):
    cfg = {
        "datasets": [{"name": "toy", "synth": DATA}],
        "mechanisms": [{"kind": "N_MAR", "hops": 2}, "A_MNAR"],
        "p_miss": [0.4],
        "repetitions": 2,
        "imputers": ["feature_propagation", "graph_average"],
        "seed": 99,
        "save_masks": True,
        "out": str(tmp_path / "out"),
    }
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert main(["run", "--config", str(tmp_path / "cfg.json")]) == 0
    main(["synth", "--out", str(tmp_path / "ds"), "--nodes", "150", "--features", "4", "--seed", "2", "--name", "toy"])
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    samples = json.loads((tmp_path / "out" / "report.json").read_text())["samples"]
    for t in manifest["mask_tuples"]:
        spec_file = tmp_path / f"{t['id']}.json"
        spec_file.write_text(json.dumps(t["spec"]))
        mask = tmp_path / f"{t['id']}.gamm"
        assert main(["mask", str(tmp_path / "ds"), "--spec", str(spec_file), "--out", str(mask)]) == 0
        stored = (tmp_path / "out" / "masks" / f"{t['id']}.gamm").read_bytes()
        assert Mask.read(mask).observed.tobytes() == Mask.from_bytes(stored).observed.tobytes()
        for imputer in ("feature_propagation", "graph_average"):
            imp = tmp_path / "imp.csv"
            main(["impute", str(tmp_path / "ds"), "--mask", str(mask), "--imputer", imputer, "--out", str(imp)])
            capsys.readouterr()
            main(["eval", str(tmp_path / "ds"), "--mask", str(mask), "--imputed", str(imp)])
            got = json.loads(capsys.readouterr().out)
            (ref,) = [
                s for s in samples
                if s["mechanism"] == t["mechanism"] and s["repetition"] == t["repetition"] and s["imputer"] == imputer
            ]
            assert got["mae"] == ref["mae"] and got["rmse"] == ref["rmse"]


def test_run_flag_overrides_and_report(tmp_path, dataset, capsys):
    out = tmp_path / "sweep"
    argv = ["run", "--dataset", str(dataset), "--mechanism", "MCAR", "--mechanism", "S_MAR", "--p-miss", "0.2,0.5",
            "--reps", "2", "--seed", "3", "--out", str(out), "--jobs", "2", "--imputer", "tabular_mean"]
    assert main(argv) == 0
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["p_miss"] == [0.2, 0.5] and cfg["repetitions"] == 2 and cfg["jobs"] == 2
    original = (out / "report.json").read_bytes()
    (out / "report.json").unlink()
    assert main(["report", str(out)]) == 0
    assert (out / "report.json").read_bytes() == original


def test_exit_codes(tmp_path, dataset, capsys):
    assert main(["run", "--dataset", str(dataset), "--reps", "0", "--out", str(tmp_path / "o")]) == 2
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 2
    broken = tmp_path / "broken"
    broken.mkdir()
    (broken / "edges.tsv").write_text("0 1\n")
    (broken / "features.csv").write_text("1.0\n")
    assert main(["run", "--dataset", str(broken), "--out", str(tmp_path / "o2")]) == 3
    assert main(["info", str(broken)]) == 3
    assert main(["mask", str(dataset), "--mechanism", "S_MNAR", "--p-miss", "0.2"]) == 2
    assert main(["mask", str(dataset), "--mechanism", "A_MAR", "--p-miss", "0.2"]) == 2
    assert main(["report", str(tmp_path)]) == 2
    plugin = tmp_path / "tamper.py"
    plugin.write_text("import sys\nsys.exit(1)\n")
    argv = ["run", "--dataset", str(dataset), "--mechanism", "MCAR", "--p-miss", "0.2", "--reps", "2",
            "--imputer", f"external:{plugin}", "--out", str(tmp_path / "o3")]
    assert main(argv) == 4
    assert (tmp_path / "o3" / "report.json").is_file()


def test_csv_mask_and_info(dataset, tmp_path, capsys):
    path = tmp_path / "m.csv"
    assert main(["mask", str(dataset), "--mechanism", "N_MNAR", "--p-miss", "0.2", "--format", "csv", "--out", str(path)]) == 0
    rows = [line.split(",") for line in path.read_text().splitlines()]
    assert len(rows) == 150 and all(len(r) == 4 and set(r) <= {"0", "1"} for r in rows)
    assert Mask.read(path).num_missing == sum(r.count("0") for r in rows) > 0
    capsys.readouterr()
    assert main(["info", str(dataset)]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["nodes"] == 150 and info["classes"] == 2


def test_entry_point_and_log_env(tmp_path, dataset):
    proc = subprocess.run(
        [sys.executable, "-m", "gamm.cli", "mask", str(dataset), "--mechanism", "MCAR", "--p-miss", "0.5",
         "--out", str(tmp_path / "m.gamm")],
        capture_output=True, text=True, env={"GAMM_LOG": "debug", "PATH": ""},
    )
    assert proc.returncode == 0, proc.stderr
    assert "achieved rate" in proc.stdout
