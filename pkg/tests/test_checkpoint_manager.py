"""
Tests for checkpoint containers.
"""
import pytest
import torch

from checkpoint_manager import (
    DENOISER_KIND,
    HCC_KIND,
    checkpoint_config,
    load_checkpoint,
    load_denoiser,
    load_denoiser_state,
    load_hand_codebook,
    save_checkpoint,
)
from conftest import make_tiny_config
from denoiser import Denoiser
from enums import TrainingStage
from errors import CheckpointError
from hand_codebook import HandCodebookModel, make_training_state, vq_training_step


@pytest.fixture
def config():
    return make_tiny_config()


def build_denoiser(config, temporal=False):
    return Denoiser(config.denoiser, config.audio, config.codebook.code_dim, temporal=temporal)


def test_codebook_checkpoint_restores_weights_and_usage(tmp_path, config):
    model = HandCodebookModel(config.codebook)
    state = make_training_state(model, lr=1e-3)
    vq_training_step(torch.rand(2, 3, 16, 16) * 2 - 1, state)
    path = save_checkpoint(tmp_path / "cb.pt", HCC_KIND, TrainingStage.CODEBOOK, config, model,
                           state.optimizer, step=state.step)
    assert not (tmp_path / "cb.pt.tmp").exists()

    payload = load_checkpoint(path, HCC_KIND)
    assert payload["step"] == 1 and payload["stage"] == "codebook"
    assert checkpoint_config(payload) == config

    restored = load_hand_codebook(path, config)
    assert restored.is_pretrained
    assert torch.equal(restored.quantizer.embedding, model.quantizer.embedding)
    assert torch.equal(restored.quantizer.usage_counts, model.quantizer.usage_counts)


def test_codebook_geometry_mismatch(tmp_path, config):
    path = save_checkpoint(tmp_path / "cb.pt", HCC_KIND, TrainingStage.CODEBOOK, config,
                           HandCodebookModel(config.codebook))
    other = make_tiny_config(codebook={"codebook_size": 4})
    with pytest.raises(CheckpointError, match="geometry"):
        load_hand_codebook(path, other)
    online = make_tiny_config(codebook={"mode": "online"})
    assert load_hand_codebook(path, online).is_pretrained


def test_load_checkpoint_errors(tmp_path, config):
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "none.pt", HCC_KIND)
    junk = tmp_path / "junk.pt"
    junk.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError, match="Could not read"):
        load_checkpoint(junk, HCC_KIND)
    path = save_checkpoint(tmp_path / "d.pt", DENOISER_KIND, TrainingStage.STAGE1, config, build_denoiser(config))
    with pytest.raises(CheckpointError, match="expected 'hcc'"):
        load_checkpoint(path, HCC_KIND)
    torch.save({"format_version": 99, "kind": HCC_KIND}, tmp_path / "v.pt")
    with pytest.raises(CheckpointError, match="format"):
        load_checkpoint(tmp_path / "v.pt", HCC_KIND)


def test_stage1_checkpoint_seeds_stage2_model(tmp_path, config):
    stage1 = build_denoiser(config)
    path = save_checkpoint(tmp_path / "s1.pt", DENOISER_KIND, TrainingStage.STAGE1, config, stage1)
    assert not load_denoiser(path).has_temporal
    grown = load_denoiser(path, temporal=True)
    assert grown.has_temporal
    assert torch.equal(grown.conv_in.weight, stage1.conv_in.weight)


def test_stage2_checkpoint_needs_temporal_topology(tmp_path, config):
    stage2 = build_denoiser(config, temporal=True)
    path = save_checkpoint(tmp_path / "s2.pt", DENOISER_KIND, TrainingStage.STAGE2, config, stage2)
    restored = load_denoiser(path)
    assert restored.has_temporal
    for name, p in stage2.temporal.named_parameters():
        assert torch.equal(dict(restored.temporal.named_parameters())[name], p)
    with pytest.raises(CheckpointError, match="stage-1 topology"):
        load_denoiser_state(build_denoiser(config), load_checkpoint(path, DENOISER_KIND))


def test_denoiser_shape_mismatch(tmp_path, config):
    path = save_checkpoint(tmp_path / "s1.pt", DENOISER_KIND, TrainingStage.STAGE1, config, build_denoiser(config))
    wider = make_tiny_config(denoiser={"base_width": 16})
    with pytest.raises(CheckpointError):
        load_denoiser_state(build_denoiser(wider), load_checkpoint(path, DENOISER_KIND))
