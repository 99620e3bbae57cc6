"""End-to-end tests of the command-line entry point."""

import json

import pytest

from cli import main

TINY = ["--set", "image_size=16", "--set", "channel_scale=0.0625", "--set", "z_dim=16",
        "--set", "batch_size=8", "--set", "n_rot_base=2", "--set", "dataset_size=64",
        "--set", "test_size=16", "--set", "fid_samples=1000", "--set", "log_every=1"]


def _error(capsys):
    line = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(line)


@pytest.fixture
def shapes_file(tmp_path):
    path = tmp_path / "shapes.ssds"
    assert main(["gen-data", "--out", str(path), "--n", "200", "--size", "16"]) == 0
    return path


def test_gen_data(shapes_file, capsys):
    assert shapes_file.stat().st_size > 200 * 3 * 16 * 16
    assert main(["gen-data", "--out", str(shapes_file.with_name("again.ssds")), "--n", "200", "--size", "16"]) == 0
    assert shapes_file.read_bytes() == shapes_file.with_name("again.ssds").read_bytes()


def test_fid_of_identical_sources(shapes_file, capsys):
    capsys.readouterr()
    assert main(["fid", "--a", str(shapes_file), "--b", str(shapes_file)]) == 0
    out = capsys.readouterr().out
    assert "embedder: pca_pixels fitted on" in out
    result = json.loads(out.strip().splitlines()[-1])
    assert abs(result["fid"]) < 1e-6
    assert result["embedder"] == "pca_pixels" and result["n_a"] == 200


def test_unknown_flag_is_usage_error(capsys):
    assert main(["train", "--bogus"]) == 2
    assert _error(capsys)["error"] == "UsageError"


def test_missing_subcommand(capsys):
    assert main([]) == 2
    assert "error" in _error(capsys)


def test_unknown_config_key(tmp_path, capsys):
    assert main(["train", "--set", "learning_speed=3", "--out", str(tmp_path / "run")]) == 2
    assert _error(capsys)["error"] == "ConfigError"


def test_bad_log_level(capsys):
    assert main(["--log-level", "LOUD", "report", "--runs", "x", "--out", "y"]) == 2
    assert "log level" in _error(capsys)["message"]


def test_missing_dataset_is_runtime_error(tmp_path, capsys):
    assert main(["fid", "--a", str(tmp_path / "none.ssds"), "--b", str(tmp_path / "none.ssds")]) == 1
    assert "error" in _error(capsys)


def test_train_is_reproducible_and_reportable(tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["train", *TINY, "--steps", "2", "--no-eval", "--seed", "3",
                     "--out", str(tmp_path / "runs" / name)]) == 0
    a, b = tmp_path / "runs" / "a", tmp_path / "runs" / "b"
    for artifact in ("metrics.csv", "checkpoints/step_0000002.ssgn", "config.cfg"):
        assert (a / artifact).read_bytes() == (b / artifact).read_bytes()
    assert json.loads((a / "manifest.json").read_text())["seeds"] == [3]

    assert main(["report", "--runs", str(tmp_path / "runs"), "--out", str(tmp_path / "report")]) == 0
    runs_csv = (tmp_path / "report" / "runs.csv").read_text().splitlines()
    assert runs_csv[0].startswith("run,seed,variant")
    assert len(runs_csv) == 3


def test_fid_against_checkpoint(tmp_path, shapes_file, capsys):
    run = tmp_path / "run"
    assert main(["train", *TINY, "--steps", "1", "--no-eval", "--out", str(run)]) == 0
    capsys.readouterr()
    checkpoint = run / "checkpoints" / "step_0000001.ssgn"
    assert main(["fid", "--a", str(shapes_file), "--b", str(checkpoint), "--samples", "1000"]) == 0
    result = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert result["n_b"] == 1000 and result["fid"] > 0


def test_probe_checkpoint(tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", *TINY, "--set", "probe_train_size=32", "--set", "probe_test_size=15",
                 "--steps", "1", "--no-eval", "--out", str(run)]) == 0
    capsys.readouterr()
    assert main(["probe", "--checkpoint", str(run / "checkpoints" / "step_0000001.ssgn"), "--epochs", "1"]) == 0
    result = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert result["step"] == 1
    assert set(result) == {"step", "probe_block0", "probe_block1", "probe_block2", "probe_block3", "best"}

    assert main(["probe", "--run", str(run), "--epochs", "1", "--out", str(tmp_path / "probe.csv")]) == 0
    assert len((tmp_path / "probe.csv").read_text().splitlines()) == 3
