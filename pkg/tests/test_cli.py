import json
from pathlib import Path

import numpy as np
import pytest

from transecg import cli

TINY_ARGS = [
    "--set", "seq_len=1000", "--set", "patch_size=50",
    "--set", "hidden_dim=8", "--set", "n_layers=2", "--set", "n_heads=2",
    "--set", "mlp_dim=16", "--set", "survival_prob=1.0",
    "--set", "synth_subjects=8", "--set", "synth_duration_s=16",
    "--set", "max_epochs=2", "--set", "batch_size=8",
    "--set", "lr=0.001", "--set", "explain_windows=4",
]


def run(command, workdir, extra=()):
    return cli.main([command, "--workdir", str(workdir), "--seed", "0",
                     "--task", "gender", *TINY_ARGS, *extra])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One full synth -> preprocess -> train run shared across tests."""
    workdir = tmp_path_factory.mktemp("pipeline")
    for command in ("synth", "preprocess", "train"):
        assert run(command, workdir) == 0
    return workdir


class TestConfig:
    def test_defaults_valid(self):
        cli.RunConfig().validate()

    def test_negative_lr_names_field(self):
        cfg = cli.RunConfig(lr=-1.0)
        with pytest.raises(ValueError, match="lr"):
            cfg.validate()

    def test_unknown_field_rejected(self):
        with pytest.raises(ValueError, match="unknown config field"):
            cli._apply(cli.RunConfig(), {"bogus": 1})

    def test_set_coerces_to_field_type(self):
        cfg = cli._apply(cli.RunConfig(), {"max_epochs": "7", "lr": "0.5"}, coerce=True)
        assert cfg.max_epochs == 7 and isinstance(cfg.max_epochs, int)
        assert cfg.lr == 0.5

    def test_config_file_plus_overrides(self, tmp_path):
        cfile = tmp_path / "cfg.json"
        cfile.write_text(json.dumps({"batch_size": 4, "task": "age"}))
        import argparse
        args = argparse.Namespace(config=str(cfile), set=["batch_size=16"],
                                  workdir="w", seed=3, task=None)
        cfg = cli.load_config(args)
        assert cfg.batch_size == 16  # --set wins over the file
        assert cfg.task == "age"
        assert cfg.seed == 3 and cfg.workdir == "w"


class TestCommands:
    def test_synth_writes_manifest(self, pipeline):
        manifest = json.loads((pipeline / "data" / "manifest.json").read_text())
        assert len(manifest["records"]) == 8
        genders = {r["gender"] for r in manifest["records"]}
        assert genders == {"male", "female"}

    def test_preprocess_store_shape(self, pipeline):
        index = json.loads((pipeline / "windows.json").read_text())
        n = len(index["windows"])
        assert n == 8 * 4  # 16 s records, 1000-sample windows at 250 Hz
        data = np.fromfile(pipeline / "windows.bin", dtype="<f8")
        assert data.size == n * index["seq_len"]
        assert np.all((data >= 0.0) & (data <= 1.0))  # windows are normalized

    def test_train_outputs(self, pipeline):
        assert (pipeline / "model.ckpt").exists()
        report = json.loads((pipeline / "train_report.json").read_text())
        assert len(report["epochs"]) <= 2
        assert report["test_metrics"]["accuracy"] >= 0.0

    def test_evaluate_metrics_file(self, pipeline):
        assert run("evaluate", pipeline) == 0
        metrics = json.loads((pipeline / "metrics.json").read_text())
        for key in ("accuracy", "macro_f1", "per_class_auc", "roc"):
            assert key in metrics

    def test_evaluate_is_byte_deterministic(self, pipeline):
        assert run("evaluate", pipeline) == 0
        first = (pipeline / "metrics.json").read_bytes()
        assert run("evaluate", pipeline) == 0
        assert (pipeline / "metrics.json").read_bytes() == first

    def test_explain_artifacts(self, pipeline):
        assert run("explain", pipeline) == 0
        out = pipeline / "explain"
        doc = json.loads((out / "attribution.json").read_text())
        assert sum(doc["percentages"].values()) == pytest.approx(100.0, abs=0.01)
        assert 1 <= len(doc["top3"]) <= 3
        assert (out / "attribution.svg").exists()
        assert (out / "attribution_per_head.csv").exists()


class TestErrors:
    def test_negative_lr_exits_nonzero(self, tmp_path, capsys):
        code = run("synth", tmp_path, extra=["--set", "lr=-1"])
        assert code == 1
        assert "lr" in capsys.readouterr().err

    def test_missing_checkpoint_exits_nonzero(self, tmp_path, capsys):
        (tmp_path / "windows.json").write_text(json.dumps({
            "seq_len": 1000, "fs": 250.0, "windows": []}))
        (tmp_path / "windows.bin").write_bytes(b"")
        code = run("evaluate", tmp_path)
        assert code == 1
        assert "checkpoint" in capsys.readouterr().err

    def test_malformed_set_rejected(self, tmp_path, capsys):
        code = cli.main(["synth", "--workdir", str(tmp_path), "--set", "oops"])
        assert code == 1
        assert "key=value" in capsys.readouterr().err

    def test_bad_task_rejected_by_config(self):
        with pytest.raises(ValueError, match="task"):
            cli.RunConfig(task="species").validate()
