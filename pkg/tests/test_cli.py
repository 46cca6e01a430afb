import json
import os

import pandas as pd
import pytest

from desense_kf import __version__
from desense_kf import logging as lg
from desense_kf.cli import (
    EXIT_CHECK_FAILED,
    EXIT_CONFIG,
    EXIT_EXPERIMENT,
    EXIT_OK,
    cmd_compare,
    cmd_run,
    load_experiment_config,
    main,
    resolve_seed,
)
from desense_kf.exceptions import ConfigError
from desense_kf.montecarlo import ExperimentConfig

SCHEMES = [
    {"name": "KF", "kind": "conventional"},
    {"name": "ADKF", "kind": "adkf", "w_a": [[0.003, 0.0], [0.0, 0.075]]},
]


def write_config(tmp_path, name="exp.json", **kwargs):
    data = {"n_cases": 3, "n_epochs": 12, "seed": 5, "schemes": SCHEMES}
    data.update(kwargs)
    path = tmp_path / name
    path.write_text(json.dumps(data, indent=4))
    return path


class TestConfigLoading:
    """Test config parsing and error reporting"""

    def test_bundled(self):
        cfg, label = load_experiment_config(None)
        assert "bundled" in label
        assert cfg.n_cases == 5000
        assert [s.name for s in cfg.schemes] == ["KF", "ADKF", "KSDKF", "KSDKF-0.1I"]
        assert cfg.schemes[1].w_a == [[0.003, 0.0], [0.0, 0.075]]

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{\n  "n_cases": 3,\n  oops\n}\n')
        with pytest.raises(ConfigError) as info:
            load_experiment_config(path)
        assert info.value.line == 3
        assert f"{path}:3:" in str(info.value)

    def test_non_psd_weight_is_line_anchored(self, tmp_path):
        path = write_config(
            tmp_path,
            schemes=[SCHEMES[0], {"name": "bad", "kind": "adkf", "w_a": [[1.0, 2.0], [2.0, 1.0]]}],
        )
        with pytest.raises(ConfigError, match="bad") as info:
            load_experiment_config(path)
        lines = path.read_text().splitlines()
        assert info.value.line is not None
        assert '"bad"' in lines[info.value.line - 1]

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_experiment_config(tmp_path / "absent.json")

    def test_relative_model_path(self, tmp_path):
        path = write_config(tmp_path, model_path="model.json")
        cfg, _ = load_experiment_config(path)
        assert cfg.model_path == tmp_path / "model.json"


class TestSeed:
    """Test seed precedence"""

    def test_precedence(self, monkeypatch):
        monkeypatch.setenv("DESENSE_KF_SEED", "11")
        with_seed = ExperimentConfig(seed=7, schemes=SCHEMES)
        without = ExperimentConfig(schemes=SCHEMES)
        assert resolve_seed(3, with_seed) == 3
        assert resolve_seed(None, with_seed) == 7
        assert resolve_seed(None, without) == 11

    def test_missing_or_invalid(self, monkeypatch):
        cfg = ExperimentConfig(schemes=SCHEMES)
        monkeypatch.delenv("DESENSE_KF_SEED", raising=False)
        with pytest.raises(ConfigError):
            resolve_seed(None, cfg)
        monkeypatch.setenv("DESENSE_KF_SEED", "abc")
        with pytest.raises(ConfigError):
            resolve_seed(None, cfg)
        with pytest.raises(ConfigError):
            resolve_seed(2**64, cfg)


class TestRun:
    """Test the run command"""

    def test_outputs(self, tmp_path, capsys):
        out = tmp_path / "out"
        assert cmd_run(write_config(tmp_path), out) == EXIT_OK
        manifest = json.loads((out / "manifest.json").read_text())
        assert set(os.listdir(out)) == set(manifest["outputs"].values())
        assert manifest["seed"] == 5
        assert manifest["version"] == __version__
        assert manifest["failed_cases"] == 0
        assert manifest["n_ok"] == 3
        assert manifest["config"]["n_epochs"] == 12
        rms = pd.read_csv(out / "rms.csv")
        cost = pd.read_csv(out / "cost.csv")
        assert list(rms.columns) == ["epoch", "scheme", "state_index", "rms"]
        assert list(cost.columns) == [
            "epoch",
            "scheme",
            "mean_cost",
            "mean_penalty",
            "mean_ref_cost",
            "mean_ref_penalty",
        ]
        assert len(rms) == 2 * 12 * 2
        assert "ADKF" in capsys.readouterr().out

    def test_byte_stable(self, tmp_path):
        config = write_config(tmp_path)
        assert cmd_run(config, tmp_path / "a") == EXIT_OK
        assert cmd_run(config, tmp_path / "b", jobs=2) == EXIT_OK
        for name in ("rms.csv", "cost.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_config_errors(self, tmp_path, monkeypatch):
        monkeypatch.delenv("DESENSE_KF_SEED", raising=False)
        assert cmd_run(tmp_path / "absent.json", tmp_path / "out") == EXIT_CONFIG
        bad = write_config(
            tmp_path, schemes=[{"name": "bad", "kind": "ksdkf", "w_list": [[[-1.0]]]}]
        )
        assert cmd_run(bad, tmp_path / "out") == EXIT_CONFIG
        unseeded = write_config(tmp_path, name="unseeded.json", seed=None)
        assert cmd_run(unseeded, tmp_path / "out") == EXIT_CONFIG
        wrong_dims = write_config(
            tmp_path, name="dims.json", schemes=[{"name": "A", "kind": "adkf", "w_a": [[1.0]]}]
        )
        assert cmd_run(wrong_dims, tmp_path / "out") == EXIT_CONFIG
        assert not (tmp_path / "out").exists()

    def test_experiment_failure(self, tmp_path):
        model = tmp_path / "quiet.json"
        model.write_text(
            json.dumps(
                {
                    "phi": [[1.0, 0.1], [-0.5, 0.9]],
                    "h": [[1.0, 0.0], [0.0, 1.0]],
                    "q": [[0.0, 0.0], [0.0, 0.0]],
                    "r": [[0.0, 0.0], [0.0, 0.0]],
                    "n_params": 2,
                }
            )
        )
        config = write_config(tmp_path, model_path="quiet.json", p0_cov=[[0.0, 0.0], [0.0, 0.0]])
        assert cmd_run(config, tmp_path / "out") == EXIT_EXPERIMENT

    def test_main_seed_flag(self, tmp_path):
        out = tmp_path / "out"
        code = main(["run", "--config", str(write_config(tmp_path)), "--out", str(out), "--seed", "9"])
        assert code == EXIT_OK
        assert json.loads((out / "manifest.json").read_text())["seed"] == 9


class TestVerify:
    """Test the verify command"""

    def test_pass(self, capsys, monkeypatch):
        monkeypatch.delenv("LOG_LEVEL", raising=False)
        monkeypatch.setattr(lg, "debug", False)
        assert main(["verify", "--verbose"]) == EXIT_OK
        output = capsys.readouterr().out
        assert "FAIL" not in output
        assert "margin" in output

    def test_negative_control(self, capsys):
        assert main(["verify", "--perturb-gain", "0.1"]) == EXIT_CHECK_FAILED
        output = capsys.readouterr().out
        assert "gain-stationarity" in output
        assert "FAIL" in output
        assert "margin" not in output


class TestCompare:
    """Test the compare command"""

    def test_identical_runs(self, tmp_path):
        run = tmp_path / "run"
        assert cmd_run(write_config(tmp_path), run) == EXIT_OK
        out = tmp_path / "cmp"
        assert cmd_compare([run, run], out) == EXIT_OK
        delta = pd.read_csv(out / "delta.csv")
        assert len(delta) > 0
        assert (delta["delta"] == 0.0).all()
        summary = pd.read_csv(out / "summary.csv")
        assert list(summary.columns) == ["run", "scheme", "metric", "epoch_mean"]
        assert set(summary["metric"]) == {
            "rms_x1",
            "rms_x2",
            "mean_cost",
            "mean_penalty",
            "mean_ref_cost",
            "mean_ref_penalty",
        }

    def test_baseline(self, tmp_path):
        run = tmp_path / "run"
        cmd_run(write_config(tmp_path), run)
        out = tmp_path / "cmp"
        assert cmd_compare([run], out, baseline="KF") == EXIT_OK
        scheme_delta = pd.read_csv(out / "scheme_delta.csv")
        assert set(scheme_delta["scheme"]) == {"ADKF"}
        adkf = pd.read_csv(run / "cost.csv").query("scheme == 'ADKF'")
        penalty_delta = scheme_delta.query("metric == 'mean_penalty'")
        assert penalty_delta["delta"].tolist() == pytest.approx(
            adkf["mean_penalty"].tolist()
        )
        assert cmd_compare([run], tmp_path / "cmp2", baseline="nope") == EXIT_CONFIG

    def test_mismatched_epochs(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        cmd_run(write_config(tmp_path), a)
        cmd_run(write_config(tmp_path, name="short.json", n_epochs=11), b)
        assert cmd_compare([a, b], tmp_path / "cmp") == EXIT_CONFIG

    def test_missing_run(self, tmp_path):
        assert cmd_compare([tmp_path / "nothing"], tmp_path / "cmp") == EXIT_CONFIG
