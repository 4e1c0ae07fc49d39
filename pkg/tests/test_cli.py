"""
End-to-end tests of the command-line interface via click's CliRunner.
"""

import json

import pytest
import yaml
from click.testing import CliRunner

from faalab.cli import cli
from faalab.evalsuite import read_report

TINY_RUN = {
    "world": {
        "num_identities": 24,
        "identity_split": [0.5, 0.25, 0.25],
        "latent_dim": 4,
        "face_dim": 8,
        "voice_dim": 6,
        "videos_per_identity": 2,
        "faces_per_video": 2,
        "voices_per_video": 2,
        "seed": 3,
    },
    "train": {
        "batch_size": 8,
        "max_epochs": 2,
        "arch": {"embed_dim": 8, "encoder_hidden": 12, "fusion_hidden": 8, "fusion_layers": 1, "fusion_heads": 2},
    },
    "eval": {"val_trials": 30, "verification_trials": 30, "matching_trials": 30, "shortlist_k": 4},
}


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(TINY_RUN))
    return path


@pytest.fixture
def data_dir(runner, config_file, tmp_path):
    out = tmp_path / "data"
    result = runner.invoke(cli, ["gen-data", "--config", str(config_file), "--out", str(out)])
    assert result.exit_code == 0, result.output
    return out


@pytest.fixture
def run_dir(runner, config_file, data_dir, tmp_path):
    out = tmp_path / "run"
    result = runner.invoke(cli, ["train", "--data", str(data_dir), "--config", str(config_file), "--out", str(out)])
    assert result.exit_code == 0, result.output
    return out


class TestGenData:

    def test_writes_partitions_and_summary(self, runner, config_file, tmp_path):
        out = tmp_path / "data"
        result = runner.invoke(cli, ["gen-data", "--config", str(config_file), "--out", str(out)])
        assert result.exit_code == 0, result.output
        assert sorted(p.name for p in out.iterdir()) == ["manifest.json", "test.bin", "train.bin", "val.bin"]
        assert result.output.splitlines()[0].split() == ["partition", "video", "audio", "face", "id"]

    def test_refuses_non_empty_directory(self, runner, config_file, data_dir):
        result = runner.invoke(cli, ["gen-data", "--config", str(config_file), "--out", str(data_dir)])
        assert result.exit_code != 0
        assert "--force" in result.output
        forced = runner.invoke(cli, ["gen-data", "--config", str(config_file), "--out", str(data_dir), "--force"])
        assert forced.exit_code == 0, forced.output

    def test_bad_split(self, runner, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text(yaml.safe_dump({"world": {"identity_split": [0.6, 0.6, 0.2]}}))
        result = runner.invoke(cli, ["gen-data", "--config", str(path), "--out", str(tmp_path / "data")])
        assert result.exit_code != 0
        assert "identity_split" in result.output


class TestTrain:

    def test_outputs(self, run_dir):
        for name in ("config.yaml", "model.faac", "history.jsonl", "timings.jsonl", "final_state.json", "metrics.prom"):
            assert (run_dir / name).exists(), name
        rows = [json.loads(line) for line in (run_dir / "history.jsonl").read_text().splitlines()]
        assert [row["epoch"] for row in rows] == [1, 2]

    def test_same_seed_same_checkpoint(self, runner, config_file, data_dir, tmp_path):
        for name in ("a", "b"):
            args = ["train", "--data", str(data_dir), "--config", str(config_file), "--out", str(tmp_path / name),
                    "--seed", "9"]
            assert runner.invoke(cli, args).exit_code == 0
        assert (tmp_path / "a" / "model.faac").read_bytes() == (tmp_path / "b" / "model.faac").read_bytes()
        assert yaml.safe_load((tmp_path / "a" / "config.yaml").read_text())["train"]["seed"] == 9

    def test_forced_nan_writes_diagnostic(self, runner, config_file, data_dir, tmp_path):
        out = tmp_path / "nan"
        args = ["train", "--data", str(data_dir), "--config", str(config_file), "--out", str(out),
                "--debug-nan-at-batch", "2"]
        result = runner.invoke(cli, args)
        assert result.exit_code != 0
        diagnostic = json.loads((out / "diagnostic.json").read_text())
        assert diagnostic["batch"] == 2
        assert not (out / "model.faac").exists()

    def test_missing_dataset(self, runner, config_file, tmp_path):
        args = ["train", "--data", str(tmp_path / "nowhere"), "--config", str(config_file), "--out", str(tmp_path / "r")]
        assert runner.invoke(cli, args).exit_code != 0


class TestEval:

    def test_oracle_scores_perfectly(self, runner, config_file, data_dir, run_dir, tmp_path):
        out = tmp_path / "report.json"
        args = ["eval", "--model", str(run_dir / "model.faac"), "--data", str(data_dir), "--config", str(config_file),
                "--out", str(out), "--oracle"]
        result = runner.invoke(cli, args)
        assert result.exit_code == 0, result.output
        report = read_report(out)
        assert report.auc_u == report.acc_v2f_u == report.map_f2v == 1.0
        assert report.checkpoint_digest

    def test_single_protocol(self, runner, config_file, data_dir, run_dir, tmp_path):
        out = tmp_path / "report.json"
        args = ["eval", "--model", str(run_dir / "model.faac"), "--data", str(data_dir), "--config", str(config_file),
                "--out", str(out), "--protocols", "match", "--scoring", "cosine"]
        result = runner.invoke(cli, args)
        assert result.exit_code == 0, result.output
        report = read_report(out)
        assert report.auc_u is None and report.map_v2f is None
        assert 0.0 <= report.acc_f2v_g <= 1.0
        assert report.scoring == "cosine"


class TestSelftest:

    def test_injected_fault_exits_nonzero(self, runner):
        result = runner.invoke(cli, ["selftest", "--inject-fault", "log"])
        assert result.exit_code == 1
        assert "[FAIL] grad:log" in result.output

    def test_unknown_op_rejected(self, runner):
        result = runner.invoke(cli, ["selftest", "--inject-fault", "conv2d"])
        assert result.exit_code == 2
