"""
Tests for the vivid command line: exit codes and the main workflows.
"""
import json

import pytest
from typer.testing import CliRunner

from conftest import make_tiny_config
from keypoint_io import write_keypoints
from synthetic_data import load_clips
from training_service import dataset_paths
from vivid_cli import EXIT_CONFIG, EXIT_RUNTIME, app

runner = CliRunner()


@pytest.fixture
def tiny_file(tmp_path):
    path = tmp_path / "tiny.json"
    data = make_tiny_config().model_dump(mode="json")
    data.pop("output_dir", None)
    path.write_text(json.dumps(data))
    return path


def vivid(*args):
    return runner.invoke(app, list(map(str, args)))


def test_config_shows_resolved_values(tiny_file):
    result = vivid("--config", tiny_file, "--set", "seed=11", "config")
    assert result.exit_code == 0, result.output
    assert "seed" in result.output and "11" in result.output


@pytest.mark.parametrize(
    "args",
    [
        ("--set", "training.stage1.iters=3", "config"),
        ("--set", "seed", "config"),
        ("--preset", "huge", "config"),
        ("--set", "schedule.beta_start=0.9", "config"),
    ],
)
def test_config_problems_exit_2(args):
    result = vivid(*args)
    assert result.exit_code == EXIT_CONFIG
    assert "Error:" in result.output


def test_missing_config_file_exits_2(tmp_path):
    assert vivid("--config", tmp_path / "none.json", "config").exit_code == EXIT_CONFIG


def test_training_without_data_exits_3(tiny_file, tmp_path):
    result = vivid("--config", tiny_file, "-o", tmp_path / "runs", "train", "--stage", "stage1")
    assert result.exit_code == EXIT_RUNTIME
    assert "make-data" in result.output


def test_unknown_stage_is_rejected_by_typer(tiny_file):
    result = vivid("--config", tiny_file, "train", "--stage", "stage3")
    assert result.exit_code != 0


def test_make_data_and_train_codebook(tiny_file, tmp_path):
    root = tmp_path / "runs"
    result = vivid("--config", tiny_file, "-o", root, "make-data")
    assert result.exit_code == 0, result.output
    assert (dataset_paths(root).clips_heldout / "header.json").exists()

    result = vivid("--config", tiny_file, "-o", root, "train", "--stage", "codebook")
    assert result.exit_code == 0, result.output
    assert "done at step 4" in result.output
    assert (root / "train-codebook" / "checkpoint.pt").exists()

    result = vivid("--config", tiny_file, "-o", root, "train", "--stage", "codebook")
    assert result.exit_code == 0 and "resumed" in result.output

    # Stage 2 before stage 1 is a missing-checkpoint runtime error.
    result = vivid("--config", tiny_file, "-o", root, "train", "--stage", "stage2")
    assert result.exit_code == EXIT_RUNTIME

    changed = vivid("--config", tiny_file, "-o", root, "--set", "training.codebook.lr=0.01",
                    "train", "--stage", "codebook")
    assert changed.exit_code == EXIT_CONFIG

    result = vivid("--config", tiny_file, "-o", root, "runs", "--kind", "train")
    assert result.exit_code == 0 and "Runs" in result.output


def test_generate_from_heldout_clip(tiny_file, copied_root, tmp_path):
    out = tmp_path / "gen"
    result = vivid("--config", tiny_file, "-o", copied_root, "generate", "--clip", "1", "--drive-clip", "0",
                   "--seed", "3", "--out", out)
    assert result.exit_code == 0, result.output
    assert "output hash" in result.output
    assert (out / "latents.npy").exists()

    result = vivid("--config", tiny_file, "-o", copied_root, "generate", "--no-pct", "--out", tmp_path / "raw")
    assert result.exit_code == 0, result.output
    assert "Note:" in result.output


def test_generate_argument_errors(tiny_file, copied_root, tmp_path):
    result = vivid("--config", tiny_file, "-o", copied_root, "generate", "--ref-image", tmp_path / "x.png")
    assert result.exit_code == EXIT_CONFIG
    result = vivid("--config", tiny_file, "-o", copied_root, "generate", "--clip", "9")
    assert result.exit_code == EXIT_CONFIG
    result = vivid("--config", tiny_file, "-o", tmp_path / "empty", "generate")
    assert result.exit_code == EXIT_RUNTIME


def test_calibrate_and_metrics(tiny_file, trained_root, tmp_path):
    clips = load_clips(dataset_paths(trained_root).clips_heldout)
    write_keypoints(tmp_path / "ref.json", clips.skeletons(0)[:1], (32, 32))
    write_keypoints(tmp_path / "drive.json", clips.skeletons(1), (32, 32))
    result = vivid("--config", tiny_file, "calibrate", "--ref", tmp_path / "ref.json",
                   "--drive", tmp_path / "drive.json", "--out", tmp_path / "out.json",
                   "--report", tmp_path / "cal.csv")
    assert result.exit_code == 0, result.output
    assert (tmp_path / "out.json").exists() and (tmp_path / "cal.csv").exists()

    result = vivid("--config", tiny_file, "metrics", "--keypoints", tmp_path / "out.json")
    assert result.exit_code == 0, result.output
    assert "hkv" in result.output

    result = vivid("--config", tiny_file, "-o", trained_root, "metrics",
                   "--checkpoint", trained_root / "train-codebook" / "checkpoint.pt")
    assert result.exit_code == 0, result.output
    assert "codebook_usage" in result.output

    assert vivid("metrics").exit_code == EXIT_CONFIG
    broken = tmp_path / "broken.json"
    broken.write_text("{}")
    assert vivid("calibrate", "--ref", broken, "--drive", broken, "--out", tmp_path / "x.json").exit_code == EXIT_RUNTIME


def test_calibrate_empty_drive_file_exits_2(tiny_file, trained_root, tmp_path):
    clips = load_clips(dataset_paths(trained_root).clips_heldout)
    write_keypoints(tmp_path / "ref.json", clips.skeletons(0)[:1], (32, 32))
    write_keypoints(tmp_path / "empty.json", [], (32, 32))
    result = vivid("--config", tiny_file, "calibrate", "--ref", tmp_path / "ref.json",
                   "--drive", tmp_path / "empty.json", "--out", tmp_path / "out.json")
    assert result.exit_code == EXIT_CONFIG
    assert "no frames" in result.output
    assert not (tmp_path / "out.json").exists()


def test_ablate_unknown_variant_exits_2(tiny_file, tmp_path):
    result = vivid("--config", tiny_file, "-o", tmp_path / "runs", "ablate", "--variant", "no_such")
    assert result.exit_code == EXIT_CONFIG
    assert "baseline" in result.output


def test_runs_on_empty_root(tmp_path):
    result = vivid("-o", tmp_path / "nothing", "runs")
    assert result.exit_code == 0
    assert "No runs found" in result.output
