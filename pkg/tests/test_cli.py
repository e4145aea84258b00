import json
import subprocess
import sys

import pytest

from freqbackdoor.cli import main


@pytest.fixture()
def cfg(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({
        "seed": 1, "pairs": [[0, 1]],
        "dataset": {"manifest": {"n_subjects": 4, "segments_per_subject_per_class": 8}},
        "attack": {"kind": "professor_x"}, "strategy_source": "optimize",
        "optimizer": {"iterations": 2, "surrogate_train": {"epochs": 1}},
        "victims": [{"name": "mlp", "architecture": "mlp"}], "train": {"epochs": 2},
        "defenses": [{"kind": "strip", "n_overlays": 4}],
    }))
    return path


def run(*args):
    return main([str(a) for a in args])


def test_pipeline_subcommands(cfg, tmp_path, capsys):
    out = tmp_path / "out"
    assert run("gen-data", "--config", cfg, "--out", out / "data") == 0
    assert (out / "data").is_dir()
    assert run("split", "--config", cfg, "--out", out) == 0
    split = json.loads((out / "splits.json").read_text())
    assert split["pairs"][0]["poison_subject"] == 0
    assert run("optimize", "--config", cfg, "--out", out) == 0
    assert (out / "strategies.json").exists() and (out / "search.json").exists()
    assert run("poison", "--config", cfg, "--out", out) == 0
    assert (out / "poison.npz").exists()
    assert run("train", "--config", cfg, "--out", out) == 0
    model = out / "mlp.sbkm"
    assert model.exists()
    assert run("eval", "--config", cfg, "--out", out, "--model", model) == 0
    ev = json.loads((out / "eval.json").read_text())
    assert 0 <= ev["ca"] <= 1 and set(ev["per_class_asr"]) == {"0", "1", "2"}
    assert run("defend", "--config", cfg, "--out", out, "--model", model) == 0
    assert "strip" in json.loads((out / "defenses.json").read_text())


def test_run_and_export(cfg, tmp_path):
    assert run("run", "--config", cfg, "--out", tmp_path / "r", "--seed", 5) == 0
    report = json.loads((tmp_path / "r" / "report.json").read_text())
    assert report["config"]["seed"] == 5
    assert (tmp_path / "r" / "plots" / "summary.csv").exists()
    assert run("export-plots", "--report", tmp_path / "r" / "report.json", "--out", tmp_path / "p") == 0
    a = (tmp_path / "r" / "plots" / "summary.csv").read_bytes()
    assert a == (tmp_path / "p" / "summary.csv").read_bytes()


@pytest.mark.parametrize("args", [
    [],
    ["bogus"],
    ["run"],
    ["run", "--out", "x", "--config", "/nonexistent.json"],
    ["run", "--out", "x", "--seed", "-2"],
    ["run", "--out", "x", "--jobs", "0"],
    ["export-plots", "--report", "/nonexistent.json", "--out", "x"],
])
def test_config_errors_exit_1(args, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(args) == 1


def test_bad_config_content_exit_1(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"rho": 2.0}))
    assert run("run", "--config", bad, "--out", tmp_path) == 1


def test_runtime_failure_exit_2(cfg, tmp_path):
    # a corrupt model file passes config checks but fails at load time
    junk = tmp_path / "junk.sbkm"
    junk.write_bytes(b"not a model")
    assert run("eval", "--config", cfg, "--out", tmp_path, "--model", junk) == 2


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "freqbackdoor.cli", "run", "--out", str(tmp_path), "--seed", "-1"],
                          capture_output=True, text=True)
    assert proc.returncode == 1 and "seed" in proc.stderr
