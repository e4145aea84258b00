import csv
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from freqbackdoor import harness
from freqbackdoor.harness import ConfigError, ExperimentConfig, Preprocessing, VictimSpec


def small(**over):
    d = {"seed": 3, "pairs": [[0, 1]],
         "dataset": {"manifest": {"n_subjects": 4, "segments_per_subject_per_class": 10}},
         "attack": {"kind": "professor_x"}, "strategy_source": "random",
         "victims": [{"name": "mlp", "architecture": "mlp"}], "train": {"epochs": 2}}
    d.update(over)
    return ExperimentConfig.from_dict(d)


class TestConfig:
    @pytest.mark.parametrize("bad", [
        {"seed": -1}, {"rho": 1.0}, {"strategy_source": "guess"}, {"strategy_source": "file"},
        {"strategy_source": "file", "strategy_file": "/nonexistent.json"},
        {"dataset": {"path": "/nonexistent"}}, {"trigger_policy": "best"}, {"victims": []},
        {"victims": [{"name": "a"}, {"name": "a"}]}, {"defenses": [{"kind": "magic"}]},
        {"schema_version": 99}, {"typo_key": 1}, {"train": {"epochz": 3}},
        {"preprocessing": [{"name": "x", "kind": "remove_above"}]},
    ])
    def test_rejected(self, bad):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(bad)

    def test_roundtrip(self):
        cfg = small(preprocessing=[{"name": "lp", "kind": "remove_above", "cutoff_fraction": 0.3}],
                    defenses=[{"kind": "strip"}])
        again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert again.to_dict() == cfg.to_dict()

    def test_load_errors(self, tmp_path):
        with pytest.raises(ConfigError):
            harness.load_config(tmp_path / "missing.json")
        (tmp_path / "bad.json").write_text("{not json")
        with pytest.raises(ConfigError):
            harness.load_config(tmp_path / "bad.json")
        (tmp_path / "list.json").write_text("[1]")
        with pytest.raises(ConfigError):
            harness.load_config(tmp_path / "list.json")

    def test_relative_paths_resolved(self, tmp_path):
        (tmp_path / "s.json").write_text("{}")
        (tmp_path / "c.json").write_text(json.dumps({"strategy_source": "file", "strategy_file": "s.json"}))
        cfg = harness.load_config(tmp_path / "c.json")
        assert cfg.strategy_file == str(tmp_path / "s.json")


class TestPairs:
    def test_full_pairing(self):
        assert len(harness.resolve_pairs("full", range(10), 0)) == 90

    def test_sample_deterministic_subset(self):
        a = harness.resolve_pairs({"sample": 6}, range(10), 4)
        assert a == harness.resolve_pairs({"sample": 6}, range(10), 4)
        assert len(set(a)) == 6 and all(p != t for p, t in a)

    @pytest.mark.parametrize("spec", [{"sample": 0}, {"sample": 91}, [[1, 1]], [[0, 42]]])
    def test_invalid(self, spec):
        with pytest.raises(ConfigError):
            harness.resolve_pairs(spec, range(10), 0)


class TestPreprocessing:
    def test_lengths(self):
        assert Preprocessing("d", "downsample", keep_ratio=0.5).output_length(128) == 64
        assert Preprocessing("l", "remove_above", cutoff_fraction=0.3).output_length(128) == 128
        assert Preprocessing("l", "remove_above", cutoff_fraction=0.3).cutoff(128.0) == pytest.approx(19.2)

    def test_remove_above_kills_high_bins(self):
        X = np.random.default_rng(0).standard_normal((2, 3, 128))
        Y = Preprocessing("l", "remove_above", cutoff_hz=20.0).apply(X, 128.0)
        assert np.abs(np.fft.rfft(Y, axis=-1)[..., 21:]).max() < 1e-9


def test_mean_std_skips_missing():
    assert harness.mean_std([1.0, None, float("nan"), 3.0]) == {"mean": 2.0, "std": 1.0, "n": 2}
    assert harness.mean_std([])["n"] == 0


@given(st.lists(st.floats(0, 1), min_size=1, max_size=12))
def test_aggregate_matches_recomputation(values):
    runs = [{"status": "ok", "victims": {"v": {"ca": x, "asr": 1 - x, "per_class_asr": {"0": x}}}} for x in values]
    runs.append({"status": "failed"})
    agg = harness.aggregate(runs, ["v"], [])
    assert agg["failed"] == 1
    assert abs(agg["victims"]["v"]["ca"]["mean"] - float(np.mean(values))) <= 1e-12
    assert abs(agg["victims"]["v"]["per_class_asr"]["0"]["std"] - float(np.std(values))) <= 1e-12


@pytest.fixture(scope="module")
def report():
    cfg = small(preprocessing=[{"name": "ds", "kind": "downsample", "keep_ratio": 0.5}],
                defenses=[{"kind": "strip", "n_overlays": 5}, {"kind": "fine_prune", "ratios": [0.0, 0.5]}],
                victims=[{"name": "cnn", "architecture": "cnn1d"}])
    return cfg, harness.run_experiment(cfg)


class TestRunExperiment:
    def test_cells_complete(self, report):
        cfg, rep = report
        run = rep["runs"][0]
        assert run["status"] == "ok" and rep["aggregate"]["failed"] == 0
        assert set(run["victims"]) == {"cnn"} and set(run["robustness"]) == {"ds"}
        assert set(run["defenses"]) == {"strip", "fine_prune"}
        rates = [run["victims"]["cnn"][k] for k in ("ca", "asr", "no_attack_ca", "no_attack_asr")]
        assert all(0.0 <= r <= 1.0 for r in rates)

    def test_deterministic(self, report):
        cfg, rep = report
        again = harness.run_experiment(cfg)
        assert harness.dumps_report(harness.strip_timings(rep)) == harness.dumps_report(harness.strip_timings(again))

    def test_no_attack_chance(self):
        # identity trigger: each sample counts for exactly one target class
        rep = harness.run_experiment(small(attack={"kind": "none"}, no_attack_baseline=False))
        assert rep["runs"][0]["victims"]["mlp"]["asr"] == pytest.approx(1 / 3, abs=1e-12)

    def test_failed_cell_reported(self):
        cfg = small(victims=[{"name": "bad", "architecture": "nonexistent"}])
        rep = harness.run_experiment(cfg)
        assert rep["runs"][0]["status"] == "failed" and rep["aggregate"]["failed"] == 1

    def test_export(self, report, tmp_path):
        _, rep = report
        files = harness.export_plots(rep, tmp_path / "a")
        names = {p.name for p in files}
        assert {"run_p0_t1_residual.csv", "run_p0_t1_strip_clean_hist.csv",
                "run_p0_t1_fine_prune_pruning.csv", "summary.csv"} <= names
        with open(tmp_path / "a" / "run_p0_t1_residual.csv") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 1 + 128 and len(rows[0]) == 9
        with open(tmp_path / "a" / "run_p0_t1_strip_clean_hist.csv") as fh:
            hist = list(csv.DictReader(fh))
        n_clean = sum(int(r["count"]) for r in hist)
        assert n_clean == sum(rep["runs"][0]["defenses"]["strip"]["histograms"]["clean"]["counts"])
        again = harness.export_plots(rep, tmp_path / "b")
        for p, q in zip(files, again):
            assert p.read_bytes() == q.read_bytes()


def test_transfer_matrix_shape():
    cfg = small(optimizer={"iterations": 2, "surrogate_train": {"epochs": 1}})
    specs = [VictimSpec("mlp", "mlp"), VictimSpec("reg", "softmax_reg")]
    out = harness.transfer_matrix(cfg, specs)
    assert out["models"] == ["mlp", "reg"] and len(out["matrix"]) == 2
    assert all(len(row) == 2 for row in out["matrix"])
    for i in range(2):
        assert out["matrix"][i][i]["delta_asr"] == 0.0 and out["matrix"][i][i]["delta_ca"] == 0.0
