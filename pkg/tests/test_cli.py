import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from rdlearn.cli import main
from rdlearn.config import load_config, parse_config
from rdlearn.data import save_dataset, synth_clusters
from rdlearn.errors import ConfigError
from rdlearn.runner import RunRecord, compare_dirs

LAYERS = [
    {"kind": "Conv", "kernel": 3, "features": 4},
    {"kind": "ReLU"},
    {"kind": "MaxPool", "kernel": 2, "stride": 2, "tap": "pool1"},
    {"kind": "FullyConnected", "features": 16},
    {"kind": "ReLU", "tap": "fc"},
    {"kind": "LinearReadout", "features": 10},
    {"kind": "Softmax"},
]


def _config(name, method="Baseline", seed=3, epochs=2, **extra):
    doc = {
        "schema_version": 1,
        "name": name,
        "seed": seed,
        "dataset": {"kind": "synthetic", "num_classes": 10, "per_class": 20, "test_per_class": 10,
                    "image_shape": [1, 8, 8], "separation": 4.0, "data_seed": 1},
        "architecture": {"layers": LAYERS},
        "method": {"kind": method},
        "optimizer": {"lr": 0.05, "momentum": 0.9, "batch_size": 25},
        "schedule": {"epochs": epochs},
        "eval": {"bootstrap_samples": 3, "sample_size": 20, "bootstrap_pool": 60, "export_per_class": 2},
    }
    for section, values in extra.items():
        doc.setdefault(section, {})
        doc[section].update(values)
    return doc


def _write(tmp_path, doc):
    path = tmp_path / f"{doc['name']}.yaml"
    path.write_text(yaml.safe_dump(doc, sort_keys=False))
    return path


def _train(tmp_path, doc, capsys):
    assert main(["train", str(_write(tmp_path, doc)), "--output-root", str(tmp_path / "runs")]) == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    return RunRecord.load(out["run_dir"])


@pytest.fixture
def teacher(tmp_path, capsys):
    return _train(tmp_path, _config("teacher", seed=99, epochs=3), capsys)


def test_validate_ok(tmp_path, capsys):
    assert main(["validate", str(_write(tmp_path, _config("ok")))]) == 0
    assert json.loads(capsys.readouterr().out)["valid"] is True


def test_validate_enumerates_every_problem(tmp_path, capsys):
    doc = _config("bad", method="Rdl")
    doc["optimiser"] = {"lr": 0.1}
    doc["schedule"]["epochs"] = -1
    doc["optimizer"]["momentum"] = 1.5
    assert main(["validate", str(_write(tmp_path, doc))]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ConfigError"
    text = "\n".join(err["problems"])
    for fragment in ("optimiser: unknown key", "schedule.epochs", "optimizer.momentum", "rdl: section required",
                     "teacher_checkpoint: required"):
        assert fragment in text


def test_config_rules():
    base = _config("x")
    with pytest.raises(ConfigError, match="only allowed"):
        parse_config(yaml.safe_dump({**base, "rdl": {"tap_map": {"fc": "fc"}}}))
    bad_tap = _config("x", method="Rdl")
    bad_tap["method"]["teacher_checkpoint"] = "t.rdlk"
    bad_tap["rdl"] = {"tap_map": {"nope": "fc"}}
    with pytest.raises(ConfigError, match="unknown student tap"):
        parse_config(yaml.safe_dump(bad_tap))
    hints = _config("h", method="Hints")
    hints["method"]["teacher_checkpoint"] = "t.rdlk"
    cfg = parse_config(yaml.safe_dump(hints))
    assert cfg.method["student_tap"] == "fc"  # middle of [pool1, fc]
    assert cfg.hints_pretrain_epochs == 1
    dsn = _config("d", method="DeepSupervision")
    dsn["method"]["taps"] = ["pool1"]
    assert parse_config(yaml.safe_dump(dsn)).schedule["alpha_rule"] == "DsnDecay"
    with pytest.raises(ConfigError, match="schema_version"):
        parse_config(yaml.safe_dump({**base, "schema_version": 2}))


def test_untrained_run_is_near_chance(tmp_path, capsys):
    rec = _train(tmp_path, _config("zero", epochs=0), capsys)
    assert abs(rec.final_test_error - 0.9) < 0.08
    assert rec.history == []


def test_run_directory_layout(tmp_path, capsys):
    doc = _config("layout")
    path = _write(tmp_path, doc)
    assert main(["train", str(path), "--output-root", str(tmp_path / "runs")]) == 0
    run_dir = tmp_path / "runs" / "layout"
    for name in ("config.yaml", "checkpoint.rdlk", "metrics.csv", "metrics.json", "predictions.npz", "record.json",
                 "run.log", "rdms/pool1.csv", "rdms/pool1.json", "rdms/fc.svg"):
        assert (run_dir / name).exists(), name
    assert (run_dir / "config.yaml").read_bytes() == path.read_bytes()
    rec = json.loads((run_dir / "record.json").read_text())
    assert "PCG64" in rec["generator"]
    assert len(rec["history"]) == 2
    assert rec["wall_clock"]["seconds"] >= 0


def test_output_root_env(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("RDL_OUTPUT_ROOT", str(tmp_path / "elsewhere"))
    assert main(["train", str(_write(tmp_path, _config("env", epochs=0)))]) == 0
    assert (tmp_path / "elsewhere" / "env" / "record.json").exists()


def test_training_is_deterministic(tmp_path, capsys):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    a = _train(tmp_path / "a", _config("same"), capsys)
    b = _train(tmp_path / "b", _config("same"), capsys)
    assert a.checkpoint_path.read_bytes() == b.checkpoint_path.read_bytes()
    assert a.history == b.history
    assert (a.directory / "metrics.csv").read_bytes() == (b.directory / "metrics.csv").read_bytes()
    c = _train(tmp_path / "a", _config("other", seed=4), capsys)
    assert c.checkpoint_path.read_bytes() != a.checkpoint_path.read_bytes()


def test_rdl_alpha_zero_matches_baseline(tmp_path, capsys, teacher):
    base = _train(tmp_path, _config("base"), capsys)
    rdl = _config("rdl0", method="Rdl", schedule={"alpha0": 0.0})
    rdl["method"]["teacher_checkpoint"] = str(teacher.checkpoint_path)
    rdl["rdl"] = {"tap_map": {"pool1": "pool1", "fc": "fc"}, "pair_fraction": 0.1}
    rec = _train(tmp_path, rdl, capsys)
    assert rec.checkpoint_path.read_bytes() == base.checkpoint_path.read_bytes()


def test_every_method_runs(tmp_path, capsys, teacher):
    records = []
    for method in ("Finetune", "DeepSupervision", "Hints", "Rdl"):
        doc = _config(method.lower(), method=method, schedule={"alpha0": 1.0})
        if method != "DeepSupervision":
            doc["method"]["teacher_checkpoint"] = str(teacher.checkpoint_path)
        if method == "DeepSupervision":
            doc["method"]["taps"] = ["pool1"]
        if method == "Rdl":
            doc["rdl"] = {"tap_map": {"pool1": "pool1", "fc": "fc"}, "pair_count": 30, "metric": "MeanSquaredError"}
        if method == "Hints":
            doc["method"]["student_tap"] = "pool1"
        rec = _train(tmp_path, doc, capsys)
        assert 0.0 <= rec.final_test_error <= 1.0
        records.append(rec)
    hints = records[2]
    assert len(hints.extra["hint_losses"]) == 2  # initial + one pretraining epoch
    assert [h["epoch"] for h in hints.history] == [1]
    rdl = records[3]
    assert set(rdl.history[0]["aux_loss"]) == {"pool1", "fc"}
    assert rdl.history[0]["alpha"] == 1.0 and rdl.history[1]["alpha"] == 0.5
    dsn = records[1]
    assert dsn.history[1]["alpha"] == pytest.approx(0.1)


def test_finetune_zero_epochs_reproduces_teacher(tmp_path, capsys, teacher):
    doc = _config("ft0", method="Finetune", epochs=0)
    doc["method"]["teacher_checkpoint"] = str(teacher.checkpoint_path)
    doc["seed"] = 99
    rec = _train(tmp_path, doc, capsys)
    a = np.load(rec.directory / "predictions.npz")["predictions"]
    b = np.load(teacher.directory / "predictions.npz")["predictions"]
    np.testing.assert_array_equal(a, b)


def test_compare(tmp_path, capsys, teacher):
    base = _train(tmp_path, _config("base"), capsys)
    other = _train(tmp_path, _config("other", seed=8), capsys)
    out = tmp_path / "cmp"
    # identical runs give an all-zero distance matrix, which has no MDS axes
    with pytest.warns(RuntimeWarning, match="positive eigenvalue"):
        assert main(["compare", str(base.directory), str(base.directory), "--out", str(out)]) == 0
    with pytest.warns(RuntimeWarning, match="positive eigenvalue"):
        self_cmp = compare_dirs([base.directory, base.directory])
    assert self_cmp.p_values[0, 1] == 1.0
    for mat in self_cmp.rdm_distances.values():
        assert abs(mat[0, 1]) < 1e-12

    report = compare_dirs([base.directory, other.directory, teacher.directory], tmp_path / "cmp3")
    assert report.p_values.shape == (3, 3)
    np.testing.assert_array_equal(np.diag(report.p_values), 1.0)
    np.testing.assert_array_equal(report.p_values, report.p_values.T)
    for name in ("mcnemar_pvalues.csv", "mcnemar_pairs.csv", "errors.csv", "report.json",
                 "rdm_distance_fc_correlation.csv", "mds_fc_correlation.svg", "mds_fc_correlation.json"):
        assert (tmp_path / "cmp3" / name).exists(), name
    # ordering only permutes the tables
    rev = compare_dirs([teacher.directory, other.directory, base.directory])
    np.testing.assert_array_equal(rev.p_values, report.p_values[::-1, ::-1])
    np.testing.assert_allclose(rev.rdm_distances[("fc", "correlation")],
                               report.rdm_distances[("fc", "correlation")][::-1, ::-1], atol=1e-12)


def test_compare_rejects_mismatched_test_sets(tmp_path, capsys):
    a = _train(tmp_path, _config("a", epochs=0), capsys)
    doc = _config("b", epochs=0)
    doc["dataset"]["data_seed"] = 2
    b = _train(tmp_path, doc, capsys)
    assert main(["compare", str(a.directory), str(b.directory), "--out", str(tmp_path / "x")]) == 1
    assert "different test sets" in json.loads(capsys.readouterr().err)["message"]


def test_rdm_export(tmp_path, capsys, teacher):
    ds = synth_clusters(10, 5, (1, 8, 8), 4.0, rng_seed=0)
    save_dataset(ds, tmp_path / "ds.bin")
    stem = tmp_path / "exp" / "fc"
    stem.parent.mkdir()
    assert main(["rdm-export", str(teacher.checkpoint_path), str(tmp_path / "ds.bin"), "fc", "--per-class", "2",
                 "--out", str(stem)]) == 0
    assert json.loads(capsys.readouterr().out)["n"] == 20
    assert json.loads((tmp_path / "exp" / "fc.json").read_text())["metric"] == "Euclidean"
    rows = (tmp_path / "exp" / "fc.csv").read_text().strip().splitlines()
    assert len(rows) == 20 and all(len(r.split(",")) == 20 for r in rows)
    assert main(["rdm-export", str(teacher.checkpoint_path), str(tmp_path / "ds.bin"), "nope"]) == 1


def test_entry_point_errors(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "rdlearn.cli", "train", str(tmp_path / "missing.yaml")],
                          capture_output=True, text=True)
    assert proc.returncode != 0
    err = json.loads(proc.stderr.strip().splitlines()[-1])
    assert "error" in err


def test_shipped_configs_validate(monkeypatch):
    from pathlib import Path

    monkeypatch.setenv("RDL_MNIST_DIR", "/nonexistent")
    root = Path(__file__).resolve().parents[1] / "configs"
    paths = sorted(root.glob("*.yaml"))
    assert paths
    for p in paths:
        load_config(p)
