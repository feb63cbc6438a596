import json

import numpy as np
import pytest
import yaml

from knode_mpc import cli
from knode_mpc.config import ConfigError, RunConfig, parse_override
from knode_mpc.trajectory import Trajectory

from conftest import REDUCED


class TestConfig:
    def test_defaults(self):
        cfg = RunConfig({})
        assert list(cfg.train_specs) == ["train-r3", "train-r6"]
        assert list(cfg.val_specs) == ["val-r4"]
        assert cfg.duration == 8.0 and cfg.train.epochs == 2000
        assert cfg.layers == (16, 64, 16, 12)

    def test_unknown_keys_rejected(self):
        for doc in ({"bogus": 1}, {"train": {"bogus": 1}}, {"mpc": {"horizon": 5}}):
            with pytest.raises(ConfigError):
                RunConfig(doc)
        with pytest.raises(ConfigError):
            RunConfig({"trajectories": {"tracking": [{"kind": "circle", "size": 2.0}]}})

    def test_overrides(self):
        assert parse_override("train.learning_rate=1e-3") == {"train": {"learning_rate": 1e-3}}
        assert parse_override("mpc.N=5") == {"mpc": {"N": 5}}
        cfg = RunConfig.load(overrides=["mpc.N=5", "train.epochs=7"], seed=4)
        assert cfg.mpc.N == 5 and cfg.train.epochs == 7 and cfg.train.seed == 4
        with pytest.raises(ConfigError):
            parse_override("train.epochs")

    def test_invalid_values(self):
        for over in ("trajectories.duration=0", "trajectories.duration=1.0001", "model.features=xyz",
                     "train.learning_rate=-1", "mpc.N=0", "gp.noise=0"):
            with pytest.raises(ConfigError):
                RunConfig.load(overrides=[over])

    def test_resolved_roundtrip(self, tmp_path):
        cfg = RunConfig.load(overrides=["train.epochs=5", "trajectories.period=7.0"])
        path = cfg.write_resolved(tmp_path)
        again = RunConfig.load(path)
        assert again.doc == cfg.doc
        assert again.config_hash() == cfg.config_hash()
        assert RunConfig.load(overrides=["train.epochs=6"]).config_hash() != cfg.config_hash()

    def test_file_and_override_precedence(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text(yaml.safe_dump({"train": {"epochs": 3}, "seed": 2}))
        cfg = RunConfig.load(path, ["train.epochs=9"])
        assert cfg.train.epochs == 9 and cfg.seed == 2


class TestCommands:
    def test_zero_duration_rejected_before_simulation(self, tmp_path):
        out = tmp_path / "o"
        assert cli.run(["generate", "-q", "--out", str(out), "--set", "trajectories.duration=0"]) == 2
        assert not out.exists()

    def test_missing_data_file(self, tmp_path):
        assert cli.run(["train", "-q", "--out", str(tmp_path), "--data", str(tmp_path / "none")]) == 2

    def test_missing_config_file(self, tmp_path):
        assert cli.run(["generate", "-q", "--config", str(tmp_path / "absent.yaml")]) == 2

    def test_evaluate_without_models(self, tmp_path):
        assert cli.run(["evaluate", "-q", "--out", str(tmp_path)] + REDUCED) == 2

    def test_seed_does_not_change_data(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert cli.run(["generate", "-q", "--out", str(a), "--seed", "0"] + REDUCED) == 0
        assert cli.run(["generate", "-q", "--out", str(b), "--seed", "5"] + REDUCED) == 0
        for name in ("train-r3", "train-r6", "val-r4"):
            assert (a / "data" / f"{name}.csv").read_bytes() == (b / "data" / f"{name}.csv").read_bytes()

    def test_divergent_training_exits_3(self, tmp_path):
        args = ["-q", "--out", str(tmp_path)] + REDUCED
        assert cli.run(["generate"] + args) == 0
        assert cli.run(["train", "--set", "train.learning_rate=1e6", "--set", "train.epochs=50"] + args) == 3

    def test_reduced_run_all_artifacts(self, tmp_path):
        assert cli.run(["run-all", "-q", "--out", str(tmp_path)] + REDUCED) == 0
        for rel in ("tables/prediction.csv", "tables/tracking.csv", "tables/summary.json",
                    "models/knode.json", "models/gp.json", "config.resolved.yaml", "timings.log"):
            assert (tmp_path / rel).is_file(), rel
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["config_hash"] == RunConfig.load(tmp_path / "config.resolved.yaml").config_hash()
        assert {"python", "numpy", "scipy"} <= set(manifest["versions"])
        assert manifest["seed"] == 0
        for rel, digest in manifest["artifacts"].items():
            assert (tmp_path / rel).is_file()
        header = (tmp_path / "tables/tracking.csv").read_text().splitlines()[0]
        assert header == "spec,model,dtw_raw,dtw_normalized,rmse"


class TestDefaultRun:
    def test_three_data_files_of_4001_rows(self, default_run):
        files = sorted(p.name for p in (default_run / "data").glob("*.csv"))
        assert files == ["train-r3.csv", "train-r6.csv", "val-r4.csv"]
        for f in files:
            tr = Trajectory.from_csv(default_run / "data" / f)
            assert len(tr) == 4001
            assert tr.times[-1] == pytest.approx(8.0)

    def test_gp_has_80_rows(self, default_run):
        d = json.loads((default_run / "models/gp.json").read_text())
        assert d["kind"] == "gp"
        assert np.shape(d["inputs"]) == (80, 16) and np.shape(d["targets"]) == (80, 12)

    def test_training_report(self, default_run):
        rep = json.loads((default_run / "models/knode_report.json").read_text())
        assert rep["final_val_loss"] < 0.1 * rep["initial_val_loss"]
        assert len(rep["train_loss"]) == 2000
