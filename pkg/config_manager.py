#!/usr/bin/env python3
"""
vivid Config Manager

Validated run configuration for vivid. Field defaults carry the published
large-scale constants; `toy_config()` is the desk-scale preset the CLI uses
unless a config file overrides it. Config files are JSON and may only
contain known keys.
"""
import copy
import hashlib
import json
import math
import os
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from enums import CodebookMode, ScheduleKind
from errors import ConfigError

OUTPUT_ROOT_ENV = "VIVID_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"


class StrictModel(BaseModel):
    """Base for every config section: unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class ScheduleConfig(StrictModel):
    num_steps: int = Field(default=1000, ge=1)
    beta_start: float = 1e-4
    beta_end: float = 0.02
    kind: ScheduleKind = ScheduleKind.LINEAR

    @model_validator(mode="after")
    def _check_range(self):
        if not (0.0 < self.beta_start <= self.beta_end < 1.0):
            raise ValueError("betas must satisfy 0 < beta_start <= beta_end < 1")
        return self


class CodebookConfig(StrictModel):
    """Hand codebook (VQ-VAE) geometry and loss weighting."""

    image_size: int = Field(default=256, ge=8)
    codebook_size: int = Field(default=1024, ge=1)
    code_dim: int = Field(default=256, ge=1)
    grid_size: int = Field(default=16, ge=1)
    hidden_channels: int = Field(default=128, ge=8)
    res_blocks_per_level: int = Field(default=3, ge=0)
    beta: float = Field(default=0.25, ge=0.0)
    mode: CodebookMode = CodebookMode.OFFLINE

    @model_validator(mode="after")
    def _check_ladder(self):
        if self.image_size % self.grid_size != 0:
            raise ValueError("image_size must be a multiple of grid_size")
        factor = self.image_size // self.grid_size
        if factor & (factor - 1) != 0:
            raise ValueError("image_size / grid_size must be a power of two")
        if self.hidden_channels % 8 != 0:
            raise ValueError("hidden_channels must be divisible by 8 (group norm)")
        return self

    @property
    def num_downsamples(self) -> int:
        return int(math.log2(self.image_size // self.grid_size))

    @property
    def num_tokens(self) -> int:
        return 2 * self.grid_size * self.grid_size


class AudioConfig(StrictModel):
    window: int = Field(default=24, ge=1)
    tokens: int = Field(default=50, ge=1)
    dim: int = Field(default=384, ge=1)
    proj_dim: int = Field(default=128, ge=1)
    token_rate_hz: float = Field(default=50.0, gt=0.0)
    head_dilation: float = Field(default=0.25, ge=0.0)
    hand_dilation: float = Field(default=0.25, ge=0.0)

    @model_validator(mode="after")
    def _check_proj(self):
        if self.proj_dim >= self.dim:
            raise ValueError("proj_dim must be smaller than the audio feature dim")
        return self


class DenoiserConfig(StrictModel):
    latent_channels: int = Field(default=4, ge=1)
    latent_size: int = Field(default=16, ge=2)
    pose_channels: int = Field(default=4, ge=1)
    frame_size: int = Field(default=64, ge=2)
    base_width: int = Field(default=64, ge=8)
    channel_mult: List[int] = Field(default_factory=lambda: [1, 2])
    frames_per_clip: int = Field(default=24, ge=1)
    num_heads: int = Field(default=1, ge=1)
    use_lip_stream: bool = True
    use_head_stream: bool = True
    use_hand_stream: bool = True
    temporal_position_encoding: bool = True

    @model_validator(mode="after")
    def _check_ladder(self):
        if len(self.channel_mult) != 2:
            raise ValueError("the toy U-Net has exactly two levels")
        if self.latent_size % 2 != 0:
            raise ValueError("latent_size must be even")
        if self.frame_size % self.latent_size != 0:
            raise ValueError("frame_size must be a multiple of latent_size")
        factor = self.frame_size // self.latent_size
        if factor != 4:
            raise ValueError("frame_size / latent_size must be 4 (hand encoder ladder)")
        for width in self.widths:
            if width % 8 != 0:
                raise ValueError("channel widths must be divisible by 8 (group norm)")
            if width % self.num_heads != 0:
                raise ValueError("channel widths must be divisible by num_heads")
        return self

    @property
    def widths(self) -> List[int]:
        return [self.base_width * m for m in self.channel_mult]

    @property
    def site_resolutions(self) -> Dict[str, int]:
        """Attention sites and the latent side length each one runs at."""
        full = self.latent_size
        half = self.latent_size // 2
        return {f"down_{full}": full, f"mid_{half}": half, f"up_{full}": full}


class CalibrationConfig(StrictModel):
    enabled: bool = True
    confidence_threshold: float = Field(default=0.3, ge=0.0, le=1.0)


class StageTrainingConfig(StrictModel):
    lr: float = Field(gt=0.0)
    batch_size: int = Field(ge=1)
    iterations: int = Field(ge=1)
    optimizer: str = "adamw"
    checkpoint_every: int = Field(default=500, ge=1)
    log_every: int = Field(default=50, ge=1)
    audio_drop_prob: float = Field(default=0.1, ge=0.0, le=1.0)
    image_drop_prob: float = Field(default=0.1, ge=0.0, le=1.0)
    train_spatial: bool = False
    grad_clip: Optional[float] = 1.0

    @field_validator("optimizer")
    @classmethod
    def _known_optimizer(cls, value: str) -> str:
        if value not in ("adam", "adamw"):
            raise ValueError("optimizer must be 'adam' or 'adamw'")
        return value


class TrainingConfig(StrictModel):
    codebook: StageTrainingConfig = Field(
        default_factory=lambda: StageTrainingConfig(
            lr=1e-4, batch_size=256, iterations=200_000, optimizer="adam",
            audio_drop_prob=0.0, image_drop_prob=0.0,
        )
    )
    stage1: StageTrainingConfig = Field(
        default_factory=lambda: StageTrainingConfig(lr=1e-5, batch_size=8, iterations=30_000)
    )
    stage2: StageTrainingConfig = Field(
        default_factory=lambda: StageTrainingConfig(lr=1e-5, batch_size=4, iterations=10_000)
    )


class GuidanceConfig(StrictModel):
    audio_scale: float = Field(default=2.5, ge=0.0)
    image_scale: float = Field(default=2.5, ge=0.0)

    @model_validator(mode="after")
    def _finite(self):
        if not (math.isfinite(self.audio_scale) and math.isfinite(self.image_scale)):
            raise ValueError("guidance scales must be finite")
        return self


class SyntheticHandSpec(StrictModel):
    """Procedural hand renderer parameters (palm ellipse + finger capsules)."""

    image_size: int = Field(default=256, ge=8)
    palm_radius_range: List[float] = Field(default_factory=lambda: [0.16, 0.24])
    palm_aspect_range: List[float] = Field(default_factory=lambda: [0.75, 1.0])
    finger_count_range: List[int] = Field(default_factory=lambda: [4, 5])
    finger_width_range: List[float] = Field(default_factory=lambda: [0.035, 0.06])
    finger_length_range: List[float] = Field(default_factory=lambda: [0.18, 0.3])
    articulation_range: float = Field(default=0.6, ge=0.0)
    texture_noise: float = Field(default=0.05, ge=0.0)
    seed: int = 0


class SyntheticClipSpec(StrictModel):
    """Moving-sprite clips whose head motion follows the audio rhythm."""

    frame_size: int = Field(default=64, ge=16)
    frames: int = Field(default=24, ge=1)
    fps: float = Field(default=24.0, gt=0.0)
    rhythm_hz_range: List[float] = Field(default_factory=lambda: [1.0, 3.0])
    rhythm_amplitude_range: List[float] = Field(default_factory=lambda: [0.0, 1.0])
    head_motion_px: float = Field(default=4.0, ge=0.0)
    hand_motion_px: float = Field(default=6.0, ge=0.0)
    texture_noise: float = Field(default=0.03, ge=0.0)
    audio_noise: float = Field(default=0.1, ge=0.0)
    seed: int = 0


class DataConfig(StrictModel):
    hands: SyntheticHandSpec = Field(default_factory=SyntheticHandSpec)
    clips: SyntheticClipSpec = Field(default_factory=SyntheticClipSpec)
    num_hands: int = Field(default=2000, ge=1)
    num_heldout_hands: int = Field(default=200, ge=1)
    num_clips: int = Field(default=64, ge=1)
    num_heldout_clips: int = Field(default=4, ge=1)


class AblationConfig(StrictModel):
    codebook_iterations: int = Field(default=2000, ge=1)
    stage1_iterations: int = Field(default=1500, ge=1)
    stage2_iterations: int = Field(default=500, ge=1)
    grids: List[int] = Field(default_factory=lambda: [8, 16])
    include_online: bool = False


class RunConfig(StrictModel):
    """Everything a run needs; written verbatim next to its outputs."""

    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    codebook: CodebookConfig = Field(default_factory=CodebookConfig)
    audio: AudioConfig = Field(default_factory=AudioConfig)
    denoiser: DenoiserConfig = Field(default_factory=DenoiserConfig)
    calibration: CalibrationConfig = Field(default_factory=CalibrationConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    guidance: GuidanceConfig = Field(default_factory=GuidanceConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)
    seed: int = 0
    output_dir: Optional[str] = None

    @model_validator(mode="after")
    def _cross_checks(self):
        if self.data.hands.image_size != self.codebook.image_size:
            raise ValueError("data.hands.image_size must equal codebook.image_size")
        if self.data.clips.frame_size != self.denoiser.frame_size:
            raise ValueError("data.clips.frame_size must equal denoiser.frame_size")
        if self.data.clips.frames != self.denoiser.frames_per_clip:
            raise ValueError("data.clips.frames must equal denoiser.frames_per_clip")
        if self.audio.window != self.denoiser.frames_per_clip:
            raise ValueError("audio.window must equal denoiser.frames_per_clip (one window per frame)")
        return self

    def config_hash(self) -> str:
        """Content hash of the resolved config (stable key order)."""
        payload = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def toy_config() -> RunConfig:
    """Desk-scale preset: 64 px hands, K=64, D=32, small widths, short budgets."""
    return RunConfig(
        schedule=ScheduleConfig(num_steps=250, beta_start=1e-4, beta_end=0.08),
        codebook=CodebookConfig(
            image_size=64, codebook_size=64, code_dim=32, grid_size=16,
            hidden_channels=64, res_blocks_per_level=2,
        ),
        audio=AudioConfig(dim=64, proj_dim=32),
        denoiser=DenoiserConfig(base_width=64),
        data=DataConfig(hands=SyntheticHandSpec(image_size=64)),
        training=TrainingConfig(
            codebook=StageTrainingConfig(
                lr=5e-4, batch_size=32, iterations=5000, optimizer="adam",
                audio_drop_prob=0.0, image_drop_prob=0.0,
            ),
            stage1=StageTrainingConfig(lr=2e-4, batch_size=16, iterations=3000),
            stage2=StageTrainingConfig(lr=1e-4, batch_size=2, iterations=2000, checkpoint_every=250),
        ),
    )


PRESETS = {
    "toy": toy_config,
    "full": RunConfig,
}


def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Recursively overlay `override` on `base`; unknown keys are kept so validation can reject them."""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def get_output_root() -> Path:
    """Output root from VIVID_OUTPUT_ROOT, default ./runs."""
    return Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT))


class ConfigManager:
    """Loads, validates and persists vivid run configurations."""

    def __init__(self, config_path: Optional[Path] = None, preset: str = "toy"):
        """
        Initialize config manager.

        Args:
            config_path: Optional JSON config file overlaid on the preset.
            preset: Name of the base preset ("toy" or "full").
        """
        if preset not in PRESETS:
            raise ConfigError(f"Unknown preset '{preset}' (expected one of {sorted(PRESETS)})")
        self.config_path = config_path
        self.preset = preset
        self.config = self._load_config()

    def _load_config(self) -> RunConfig:
        """Load the preset, overlay the config file, validate."""
        base = PRESETS[self.preset]().model_dump(mode="json")
        if self.config_path is None:
            return self.validate(base)

        path = Path(self.config_path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        try:
            with open(path, "r", encoding="utf-8") as f:
                override = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Could not parse config {path}: {e}") from e
        if not isinstance(override, dict):
            raise ConfigError(f"Config {path} must contain a JSON object")
        return self.validate(_deep_merge(base, override))

    @staticmethod
    def validate(data: Dict[str, Any]) -> RunConfig:
        """Validate a raw dict into a RunConfig, raising ConfigError on failure."""
        try:
            return RunConfig.model_validate(data)
        except ValidationError as e:
            raise ConfigError(str(e)) from e

    def override(self, **updates: Any) -> RunConfig:
        """
        Apply nested overrides given as dotted keys, e.g. `{"training.stage1.iterations": 10}`.

        Returns:
            The newly validated configuration (also stored on the manager).
        """
        data = self.config.model_dump(mode="json")
        for dotted, value in updates.items():
            target = data
            parts = dotted.split(".")
            for part in parts[:-1]:
                if part not in target or not isinstance(target[part], dict):
                    raise ConfigError(f"Unknown config section '{dotted}'")
                target = target[part]
            if parts[-1] not in target:
                raise ConfigError(f"Unknown config key '{dotted}'")
            target[parts[-1]] = value
        self.config = self.validate(data)
        return self.config

    def save_resolved(self, directory: Path) -> Path:
        """Write the resolved config as config.json into `directory`."""
        return save_config(self.config, directory)

    def output_root(self) -> Path:
        """Configured output directory, falling back to VIVID_OUTPUT_ROOT."""
        if self.config.output_dir:
            return Path(self.config.output_dir)
        return get_output_root()

    def show_config(self) -> str:
        """Get formatted configuration string."""
        lines = ["vivid Configuration:", "=" * 50]
        flat = _flatten(self.config.model_dump(mode="json"))
        for key, value in sorted(flat.items()):
            lines.append(f"{key:40} : {value}")
        return "\n".join(lines)


def _flatten(data: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for key, value in data.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, name + "."))
        else:
            flat[name] = value
    return flat


def save_config(config: RunConfig, directory: Path) -> Path:
    """Write `config` as config.json (sorted keys, so equal configs give equal bytes)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    target = directory / "config.json"
    with open(target, "w", encoding="utf-8") as f:
        json.dump(config.model_dump(mode="json"), f, indent=2, sort_keys=True)
    return target


def load_resolved(path: Path) -> RunConfig:
    """Read a config.json written by `save_resolved`."""
    with open(path, "r", encoding="utf-8") as f:
        return ConfigManager.validate(json.load(f))


# Singleton instance
_config_manager: Optional[ConfigManager] = None


def get_config_manager(config_path: Optional[Path] = None, preset: str = "toy", reload: bool = False) -> ConfigManager:
    """Get singleton config manager instance (rebuilt when a path is given or on reload)."""
    global _config_manager
    if _config_manager is None or config_path is not None or reload:
        _config_manager = ConfigManager(config_path, preset=preset)
    return _config_manager
