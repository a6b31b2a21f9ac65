"""
Shared fixtures: a tiny run configuration, isolated output roots and a
`--runslow` switch for the longer training checks.
"""
import shutil
import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from config_manager import ConfigManager, RunConfig, _deep_merge, toy_config  # noqa: E402
from enums import TrainingStage  # noqa: E402
from training_service import TrainingService  # noqa: E402

TINY_OVERRIDES = {
    "schedule": {"num_steps": 10, "beta_start": 1e-3, "beta_end": 0.2},
    "codebook": {
        "image_size": 16, "codebook_size": 8, "code_dim": 8, "grid_size": 4,
        "hidden_channels": 8, "res_blocks_per_level": 1,
    },
    "audio": {"window": 4, "tokens": 6, "dim": 8, "proj_dim": 4},
    "denoiser": {"latent_size": 8, "frame_size": 32, "base_width": 8, "frames_per_clip": 4},
    "data": {
        "hands": {"image_size": 16},
        "clips": {"frame_size": 32, "frames": 4},
        "num_hands": 12,
        "num_heldout_hands": 4,
        "num_clips": 3,
        "num_heldout_clips": 2,
    },
    "training": {
        "codebook": {
            "lr": 1e-3, "batch_size": 4, "iterations": 4, "optimizer": "adam",
            "checkpoint_every": 2, "log_every": 1, "audio_drop_prob": 0.0, "image_drop_prob": 0.0,
        },
        "stage1": {"lr": 1e-3, "batch_size": 2, "iterations": 3, "checkpoint_every": 2, "log_every": 1},
        "stage2": {"lr": 1e-3, "batch_size": 1, "iterations": 2, "checkpoint_every": 1, "log_every": 1},
    },
    "ablation": {"codebook_iterations": 2, "stage1_iterations": 2, "stage2_iterations": 1, "grids": [2, 4]},
}


def make_tiny_config(output_root: Path = None, **sections) -> RunConfig:
    """Tiny config for fast CPU tests; `sections` are merged over it."""
    data = _deep_merge(toy_config().model_dump(mode="json"), TINY_OVERRIDES)
    data = _deep_merge(data, sections)
    if output_root is not None:
        data["output_dir"] = str(output_root)
    return ConfigManager.validate(data)


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow training checks")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training check (needs --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _seeded():
    torch.manual_seed(0)


@pytest.fixture
def output_root(tmp_path, monkeypatch):
    """Isolated output root, also exported through VIVID_OUTPUT_ROOT."""
    root = tmp_path / "runs"
    monkeypatch.setenv("VIVID_OUTPUT_ROOT", str(root))
    return root


@pytest.fixture
def tiny_config(output_root):
    return make_tiny_config(output_root)


@pytest.fixture(scope="session")
def trained_root(tmp_path_factory):
    """Datasets plus codebook, stage-1 and stage-2 checkpoints under one root."""
    root = tmp_path_factory.mktemp("trained") / "runs"
    service = TrainingService(make_tiny_config(root), root)
    service.make_datasets()
    for stage in TrainingStage:
        service.train(stage)
    return root


@pytest.fixture
def copied_root(trained_root, tmp_path):
    """A private copy of `trained_root` that a test may modify."""
    root = tmp_path / "runs"
    shutil.copytree(trained_root, root)
    return root
