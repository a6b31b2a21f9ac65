"""
Tests for generation, calibration reports, metric evaluation and ablations.
"""
import json
import shutil

import numpy as np
import pytest
import torch
from PIL import Image

from config_manager import GuidanceConfig, toy_config
from conftest import make_tiny_config
from enums import TrainingStage
from errors import CheckpointError, ConfigError, ShapeError
from generation_service import (
    AblationRunner,
    GenerationService,
    ablation_budget,
    ablation_variants,
    evaluate_metrics,
    inputs_from_clips,
    inputs_from_files,
    run_ablation_grid,
    run_calibration,
    variant_config,
)
from keypoint_io import read_keypoints, write_keypoints
from report_generator import read_csv_report
from synthetic_data import load_clips, tensor_to_images
from training_service import TrainingService, dataset_paths, run_dir_for


@pytest.fixture
def config(trained_root):
    return make_tiny_config(trained_root)


@pytest.fixture
def heldout(trained_root):
    return load_clips(dataset_paths(trained_root).clips_heldout)


@pytest.fixture
def service(config, trained_root, tmp_path):
    # Registry in tmp_path so the shared root only holds training runs.
    return GenerationService(config, output_root=tmp_path, run_root=trained_root)


def scaled(skeletons, factor, shift=(3.0, -2.0)):
    offset = np.asarray(shift)
    return [s.with_positions({n: s.xy(n) * factor + offset for n in s.joints}) for s in skeletons]


def test_generation_writes_outputs(service, heldout, tmp_path):
    result = service.generate(inputs_from_clips(heldout, 0, 1), seed=5, run_dir=tmp_path / "gen")
    assert result.latents.shape == (4, 4, 8, 8)
    assert result.frames.shape == (4, 3, 32, 32)
    assert result.calibrated and result.notes == []
    for name in ("latents.npy", "frames.png", "metrics.csv", "calibration.csv", "driving.json", "config.json"):
        assert (result.run_dir / name).exists(), name
    assert np.load(result.run_dir / "latents.npy").shape == (4, 4, 8, 8)

    _, _, rows = read_csv_report(result.run_dir / "metrics.csv", "metrics")
    assert {r["metric"] for r in rows} >= {"hkv", "hmv", "script_hmv", "calibration_error"}
    assert result.report.hkv >= 0.0 and result.report.hmv >= 0.0
    assert result.report.metadata["output_hash"] == result.output_hash

    manifest = json.loads((result.run_dir / "manifest.json").read_text())
    assert manifest["status"] == "completed"
    assert {"denoiser", "codebook"} <= set(manifest["inputs"])
    frames, _ = read_keypoints(result.run_dir / "driving.json")
    assert len(frames) == 4


def test_same_seed_same_output(service, heldout, tmp_path):
    inputs = inputs_from_clips(heldout, 0)
    first = service.generate(inputs, seed=7, run_dir=tmp_path / "a")
    again = service.generate(inputs, seed=7, run_dir=tmp_path / "b")
    other = service.generate(inputs, seed=8, run_dir=tmp_path / "c")
    assert first.output_hash == again.output_hash
    assert torch.equal(first.latents, again.latents)
    assert other.output_hash != first.output_hash


def test_guidance_scales_change_output(service, heldout, tmp_path):
    inputs = inputs_from_clips(heldout, 1)
    off = service.generate(inputs, seed=1, guidance=GuidanceConfig(audio_scale=0.0, image_scale=0.0),
                           run_dir=tmp_path / "off")
    on = service.generate(inputs, seed=1, guidance=GuidanceConfig(audio_scale=2.5, image_scale=2.5),
                          run_dir=tmp_path / "on")
    assert off.output_hash != on.output_hash
    assert on.report.metadata["audio_scale"] == 2.5


def test_skipping_calibration_is_reported(service, heldout, tmp_path):
    inputs = inputs_from_clips(heldout, 0, 1)
    result = service.generate(inputs, seed=0, calibrate=False, run_dir=tmp_path / "raw")
    assert not result.calibrated
    assert any("calibration skipped" in note for note in result.notes)
    _, _, rows = read_csv_report(result.run_dir / "calibration.csv", "calibration")
    assert rows[0]["segment_error_after"] == ""
    manifest = json.loads((result.run_dir / "manifest.json").read_text())
    assert any("calibration skipped" in note for note in manifest["notes"])


def test_too_few_driving_frames(service, heldout, tmp_path):
    inputs = inputs_from_clips(heldout, 0)
    inputs.driving = inputs.driving[:2]
    with pytest.raises(ShapeError, match="need 4 driving frames"):
        service.generate(inputs, run_dir=tmp_path / "short")
    assert not (tmp_path / "short").exists()


def test_bad_audio_is_rejected(service, heldout, tmp_path):
    inputs = inputs_from_clips(heldout, 0)
    inputs.audio = inputs.audio[:, :, :3]
    with pytest.raises(ShapeError):
        service.generate(inputs, run_dir=tmp_path / "audio")


def test_checkpoint_and_config_mismatches(trained_root, heldout, tmp_path):
    wider = make_tiny_config(trained_root, denoiser={"base_width": 16})
    with pytest.raises(ConfigError, match="different denoiser config"):
        GenerationService(wider, tmp_path, trained_root).load_models()
    with pytest.raises(CheckpointError, match="not found"):
        GenerationService(make_tiny_config(tmp_path), tmp_path).load_models()


def test_inputs_from_clips_bounds(heldout):
    with pytest.raises(ValueError, match="out of range"):
        inputs_from_clips(heldout, 5)
    with pytest.raises(ValueError, match="out of range"):
        inputs_from_clips(heldout, 0, -1)
    inputs = inputs_from_clips(heldout, 1, 0)
    assert inputs.audio.shape[0] == 1
    assert inputs.script_head.shape == (4, 2)


def test_inputs_from_files_synthesizes_audio(config, heldout, tmp_path):
    Image.fromarray(tensor_to_images(heldout.frames[0, :1])[0]).save(tmp_path / "ref.png")
    write_keypoints(tmp_path / "ref.json", heldout.skeletons(0)[:1], (32, 32))
    write_keypoints(tmp_path / "drive.json", heldout.skeletons(1), (32, 32))
    inputs = inputs_from_files(config, tmp_path / "ref.png", tmp_path / "ref.json", tmp_path / "drive.json")
    assert inputs.reference_frame.shape == (3, 32, 32)
    assert inputs.audio.shape == (1, 4, 6, 8)
    assert len(inputs.driving) == 4 and inputs.script_head is None
    assert set(inputs.sources) == {"reference_image", "reference_keypoints", "driving_keypoints"}

    np.save(tmp_path / "audio.npy", np.zeros((4, 6, 8), dtype=np.float32))
    inputs = inputs_from_files(config, tmp_path / "ref.png", tmp_path / "ref.json", tmp_path / "drive.json",
                               audio=tmp_path / "audio.npy")
    assert inputs.audio.shape == (1, 4, 6, 8) and "audio" in inputs.sources


def test_run_calibration_removes_scale_error(heldout, tmp_path):
    reference = heldout.skeletons(0)[:1]
    write_keypoints(tmp_path / "ref.json", reference, (32, 32))
    write_keypoints(tmp_path / "drive.json", scaled(heldout.skeletons(0), 1.5), (32, 32))
    outcome = run_calibration(tmp_path / "ref.json", tmp_path / "drive.json", tmp_path / "out.json",
                              report=tmp_path / "calibration.csv")
    assert len(outcome.frames) == 4
    first = outcome.rows[0]
    assert first["segment_error_before"] == pytest.approx(0.5, abs=1e-6)
    assert first["segment_error_after"] < 0.01
    assert first["r_x"] == pytest.approx(1 / 1.5, rel=1e-3)
    written, _ = read_keypoints(tmp_path / "out.json")
    assert len(written) == 4
    _, _, rows = read_csv_report(tmp_path / "calibration.csv", "calibration")
    assert len(rows) == 4


def test_evaluate_metrics(trained_root, heldout, tmp_path):
    write_keypoints(tmp_path / "kp.json", heldout.skeletons(0), (32, 32))
    report = evaluate_metrics(keypoints=tmp_path / "kp.json")
    assert report.hkv > 0.0 and report.codebook_usage is None

    checkpoint = run_dir_for(trained_root, TrainingStage.CODEBOOK) / "checkpoint.pt"
    hands = dataset_paths(trained_root).hands_heldout
    report = evaluate_metrics(checkpoint=checkpoint, hands=hands)
    assert 0.0 < report.codebook_usage <= 1.0
    assert report.codebook_perplexity >= 1.0
    assert report.reconstruction_mse > 0.0

    with pytest.raises(ConfigError, match="hand dataset"):
        evaluate_metrics(checkpoint=checkpoint)
    with pytest.raises(ConfigError):
        evaluate_metrics()


def test_ablation_variants_and_budgets():
    config = make_tiny_config()
    names = [v.name for v in ablation_variants(config)]
    assert names == ["baseline", "no_hcc", "no_head", "grid_2", "no_pct"]
    online = make_tiny_config(ablation={"include_online": True})
    assert "online_4" in [v.name for v in ablation_variants(online)]

    budget = ablation_budget(config)
    assert budget.training.stage1.iterations == 2
    assert budget.training.stage2.checkpoint_every == 1

    no_head = next(v for v in ablation_variants(config) if v.name == "no_head")
    assert not variant_config(config, no_head).denoiser.use_head_stream
    grid = next(v for v in ablation_variants(config) if v.name == "grid_2")
    assert variant_config(config, grid).codebook.grid_size == 2 and not grid.generate


def test_ablation_grid(trained_root, tmp_path):
    root = tmp_path / "runs"
    shutil.copytree(trained_root / "data", root / "data")
    path, rows = run_ablation_grid(make_tiny_config(root), root)
    assert path == root / "ablate" / "ablation.csv"
    by_name = {row["variant"]: row for row in rows}
    assert set(by_name) == {"baseline", "no_hcc", "no_head", "grid_2", "no_pct"}
    assert "hkv" not in by_name["grid_2"]
    assert by_name["grid_2"]["codebook_usage"] <= 1.0
    assert "reconstruction_mse" not in by_name["no_hcc"]
    for name in ("baseline", "no_pct"):
        assert by_name[name]["hkv"] >= 0.0
    # Same models and seeds; only calibration differs.
    assert by_name["baseline"]["script_hmv"] == by_name["no_pct"]["script_hmv"]
    _, _, written = read_csv_report(path, "ablation")
    assert [r["variant"] for r in written] == [row["variant"] for row in rows]


def test_ablation_variant_filter(trained_root, tmp_path):
    config = make_tiny_config()
    picked = ablation_variants(config, ["no_head", "baseline"])
    assert [v.name for v in picked] == ["baseline", "no_head"]
    with pytest.raises(ConfigError, match="no_such"):
        ablation_variants(config, ["baseline", "no_such"])

    root = tmp_path / "runs"
    shutil.copytree(trained_root / "data", root / "data")
    _, rows = run_ablation_grid(make_tiny_config(root), root, variants=["no_pct"])
    assert [row["variant"] for row in rows] == ["no_pct"]


@pytest.mark.slow
def test_head_stream_raises_generated_head_motion(tmp_path):
    root = tmp_path / "runs"
    config = toy_config()
    TrainingService(config, root).make_datasets()
    runner = AblationRunner(config, root, variants=["baseline", "no_head"])
    _, rows = runner.run()
    by_name = {row["variant"]: row for row in rows}
    # Same seeds, data and budgets; only the rhythm stream differs.
    assert by_name["baseline"]["seed"] == by_name["no_head"]["seed"]
    assert by_name["baseline"]["script_hmv"] == by_name["no_head"]["script_hmv"]
    assert by_name["baseline"]["hmv"] > by_name["no_head"]["hmv"]
