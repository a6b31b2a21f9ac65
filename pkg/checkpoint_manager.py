"""
Checkpoint containers for the hand codebook and the denoiser.

A container is a `torch.save` dict with a format version, a kind
(`hcc` or `denoiser`), the training stage, the resolved run config, model
and optimizer state, the step count and codebook usage counts.
"""
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional

import torch

from config_manager import RunConfig
from denoiser import Denoiser
from enums import TrainingStage
from errors import CheckpointError
from hand_codebook import HandCodebookModel

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
HCC_KIND = "hcc"
DENOISER_KIND = "denoiser"


def save_checkpoint(
    path: Path,
    kind: str,
    stage: TrainingStage,
    config: RunConfig,
    model: torch.nn.Module,
    optimizer: Optional[torch.optim.Optimizer] = None,
    step: int = 0,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write a checkpoint atomically (temp file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": kind,
        "stage": TrainingStage(stage).value,
        "config": config.model_dump(mode="json"),
        "state": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "step": int(step),
        "extra": extra or {},
    }
    if isinstance(model, HandCodebookModel):
        payload["usage_counts"] = model.quantizer.usage_counts.clone()
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    logger.debug("saved %s checkpoint at step %d to %s", kind, step, path)
    return path


def load_checkpoint(path: Path, kind: str) -> Dict[str, Any]:
    """
    Read and validate a checkpoint container.

    Raises:
        CheckpointError: If the file is missing, unreadable, of another kind
            or of an unknown format version.
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"Could not read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format")
    if payload.get("kind") != kind:
        raise CheckpointError(f"{path} holds a '{payload.get('kind')}' checkpoint, expected '{kind}'")
    return payload


def checkpoint_config(payload: Dict[str, Any]) -> RunConfig:
    return RunConfig.model_validate(payload["config"])


def load_hand_codebook(path: Path, config: Optional[RunConfig] = None) -> HandCodebookModel:
    """
    Rebuild a pretrained codebook model.

    Raises:
        CheckpointError: If `config` describes a different codebook geometry.
    """
    payload = load_checkpoint(path, HCC_KIND)
    saved = checkpoint_config(payload).codebook
    if config is not None and config.codebook.model_dump(exclude={"mode"}) != saved.model_dump(exclude={"mode"}):
        raise CheckpointError(f"{path}: codebook geometry differs from the requested config")
    model = HandCodebookModel(saved)
    try:
        model.load_state_dict(payload["state"])
    except RuntimeError as e:
        raise CheckpointError(f"{path}: state does not fit the codebook model: {e}") from e
    model.mark_pretrained()
    return model


def load_denoiser_state(model: Denoiser, payload: Dict[str, Any]) -> None:
    """
    Load denoiser weights into `model`.

    A stage-1 checkpoint may seed a stage-2 model (temporal modules keep
    their initialization); a stage-2 checkpoint never loads into the
    stage-1 topology.

    Raises:
        CheckpointError: On a topology or shape mismatch.
    """
    stage = TrainingStage(payload["stage"])
    if stage is TrainingStage.STAGE2 and not model.has_temporal:
        raise CheckpointError("cannot load a stage-2 checkpoint into the stage-1 topology")
    state = payload["state"]
    seeding = stage is TrainingStage.STAGE1 and model.has_temporal
    try:
        missing, unexpected = model.load_state_dict(state, strict=not seeding)
    except RuntimeError as e:
        raise CheckpointError(f"denoiser state does not fit the model: {e}") from e
    bad = [k for k in missing if not k.startswith("temporal.")] + list(unexpected)
    if bad:
        raise CheckpointError(f"stage-1 checkpoint does not fit the denoiser: {bad[:5]}")


def load_denoiser(path: Path, temporal: Optional[bool] = None) -> Denoiser:
    """Rebuild a denoiser from its checkpoint; topology follows the stage tag unless given."""
    payload = load_checkpoint(path, DENOISER_KIND)
    config = checkpoint_config(payload)
    if temporal is None:
        temporal = TrainingStage(payload["stage"]) is TrainingStage.STAGE2
    model = Denoiser(config.denoiser, config.audio, config.codebook.code_dim, temporal=temporal)
    load_denoiser_state(model, payload)
    return model
