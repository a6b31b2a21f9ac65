"""
Training orchestration for the three stages.

    codebook  offline VQ-VAE pretraining on synthetic hand crops
    stage1    single-frame denoiser training (codebook frozen, or joint when online)
    stage2    clip training of the temporal modules, seeded from stage 1

Each stage owns the run directory `<root>/train-<stage>` holding the
resolved config, `checkpoint.pt` and a `loss.csv` curve. Re-running a stage
with the same config resumes from its checkpoint; a NaN aborts the run and
leaves the last checkpoint untouched.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import torch

from audio_streams import frame_aligned_streams, hand_mask_from_keypoints, head_mask_from_keypoints
from checkpoint_manager import (
    DENOISER_KIND,
    HCC_KIND,
    load_checkpoint,
    load_denoiser_state,
    load_hand_codebook,
    save_checkpoint,
)
from config_manager import RunConfig, get_output_root, load_resolved, save_config
from denoiser import (
    ConditioningBundle,
    Denoiser,
    DenoiserBatch,
    make_denoiser_training_state,
    site_masks,
    train_step_stage1,
    train_step_stage2,
)
from diffusion_core import build_schedule
from enums import CodebookMode, TrainingStage
from errors import CheckpointError, ConfigError, NonFiniteLossError
from hand_codebook import (
    HandCodebookModel,
    codebook_stats,
    embed_hand_batch,
    heldout_mse,
    make_training_state,
    vq_training_step,
)
from report_generator import CsvReport
from run_manager import CONFIG_FILE, RunTracker
from synthetic_data import (
    ClipSet,
    ToyAutoencoder,
    crop_hands,
    load_clips,
    load_hand_images,
    make_synthetic_clips,
    make_synthetic_hands,
    render_pose_maps,
)

logger = logging.getLogger(__name__)

DATA_DIR = "data"
CHECKPOINT_FILE = "checkpoint.pt"
ONLINE_CODEBOOK_FILE = "codebook.pt"
LOSS_FILE = "loss.csv"

CODEBOOK_LOSS_COLUMNS = ("step", "reconstruction", "codebook", "commitment", "total")
DENOISER_LOSS_COLUMNS = ("step", "loss", "noise", "vq")

ProgressCallback = Callable[[int, int], None]


@dataclass(frozen=True)
class DatasetPaths:
    """Where `make-data` writes the four dataset containers."""
    root: Path

    @property
    def hands_train(self) -> Path:
        return self.root / "hands" / "train"

    @property
    def hands_heldout(self) -> Path:
        return self.root / "hands" / "heldout"

    @property
    def clips_train(self) -> Path:
        return self.root / "clips" / "train"

    @property
    def clips_heldout(self) -> Path:
        return self.root / "clips" / "heldout"

    def require(self, *paths: Path) -> None:
        for path in paths:
            if not path.exists():
                raise FileNotFoundError(f"dataset {path} not found; run `vivid make-data` first")


def dataset_paths(output_root: Path) -> DatasetPaths:
    return DatasetPaths(Path(output_root) / DATA_DIR)


def run_dir_for(run_root: Path, stage: TrainingStage) -> Path:
    return Path(run_root) / f"train-{TrainingStage(stage).value}"


def codebook_checkpoint_path(run_root: Path, config: RunConfig) -> Path:
    """Offline codebooks come from the codebook stage; online ones are saved by stage 1."""
    if config.codebook.mode is CodebookMode.ONLINE:
        return run_dir_for(run_root, TrainingStage.STAGE1) / ONLINE_CODEBOOK_FILE
    return run_dir_for(run_root, TrainingStage.CODEBOOK) / CHECKPOINT_FILE


def autoencoder_for(config: RunConfig) -> ToyAutoencoder:
    cfg = config.denoiser
    return ToyAutoencoder(cfg.frame_size, cfg.latent_size, cfg.latent_channels)


def hand_crop_px(frame_size: int) -> int:
    return max(8, frame_size // 4)


@dataclass
class TrainingResult:
    stage: TrainingStage
    run_dir: Path
    checkpoint: Path
    loss_csv: Path
    steps: int
    resumed: bool
    metrics: Dict[str, float] = field(default_factory=dict)


# --------------------------------------------------------------------------
# Clip conditions
# --------------------------------------------------------------------------

@dataclass
class ClipConditions:
    """
    Every condition of a clip set, precomputed once.

    Per-frame tensors are [N, F, ...]; masks map site name to [N, F, N_site, 1].
    Hand tokens come from frame 0 of each clip through a frozen codebook; when
    the codebook trains jointly the raw crops are kept instead.
    """
    latents: torch.Tensor
    pose_maps: torch.Tensor
    lip: torch.Tensor
    rhythm: torch.Tensor
    head_mask: Dict[str, torch.Tensor]
    hand_mask: Dict[str, torch.Tensor]
    hand_tokens: Optional[torch.Tensor] = None
    left_crops: Optional[torch.Tensor] = None
    right_crops: Optional[torch.Tensor] = None

    def __len__(self) -> int:
        return int(self.latents.shape[0])

    @property
    def frames(self) -> int:
        return int(self.latents.shape[1])

    def _select(self, value: Optional[torch.Tensor], clips: torch.Tensor) -> Optional[torch.Tensor]:
        return None if value is None else value[clips]

    def frame_batch(self, clips: torch.Tensor, frames: torch.Tensor) -> DenoiserBatch:
        """Single frames (clip i, frame j) for stage 1."""
        bundle = ConditioningBundle(
            pose_maps=self.pose_maps[clips, frames],
            reference_image=self.latents[clips, 0],
            hand_tokens=self._select(self.hand_tokens, clips),
            lip=self.lip[clips, frames],
            rhythm=self.rhythm[clips, frames],
            head_mask={site: m[clips, frames] for site, m in self.head_mask.items()},
            hand_mask={site: m[clips, frames] for site, m in self.hand_mask.items()},
        )
        return DenoiserBatch(
            z0=self.latents[clips, frames],
            bundle=bundle,
            left_crops=self._select(self.left_crops, clips),
            right_crops=self._select(self.right_crops, clips),
        )

    def clip_batch(self, clips: torch.Tensor) -> DenoiserBatch:
        """Whole clips for stage 2."""
        bundle = ConditioningBundle(
            pose_maps=self.pose_maps[clips],
            reference_image=self.latents[clips, 0],
            hand_tokens=self._select(self.hand_tokens, clips),
            lip=self.lip[clips],
            rhythm=self.rhythm[clips],
            head_mask={site: m[clips] for site, m in self.head_mask.items()},
            hand_mask={site: m[clips] for site, m in self.hand_mask.items()},
        )
        return DenoiserBatch(
            z0=self.latents[clips],
            bundle=bundle,
            left_crops=self._select(self.left_crops, clips),
            right_crops=self._select(self.right_crops, clips),
        )


def build_clip_conditions(
    clips: ClipSet,
    config: RunConfig,
    codebook_model: Optional[HandCodebookModel] = None,
    keep_crops: bool = False,
) -> ClipConditions:
    """
    Render pose maps, align audio streams, rasterize masks and embed hands.

    Args:
        clips: Loaded clip container.
        config: Run config (denoiser geometry, audio rates, dilations).
        codebook_model: Frozen codebook for hand tokens; None skips them.
        keep_crops: Keep raw hand crops for joint codebook training.
    """
    cfg = config.denoiser
    fps = config.data.clips.fps
    crop_px = hand_crop_px(cfg.frame_size)
    poses, lips, rhythms, lefts, rights = [], [], [], [], []
    head: Dict[str, List[torch.Tensor]] = {site: [] for site in cfg.site_resolutions}
    hand: Dict[str, List[torch.Tensor]] = {site: [] for site in cfg.site_resolutions}
    for i in range(len(clips)):
        skeletons = clips.skeletons(i)
        poses.append(render_pose_maps(skeletons, cfg.frame_size))
        lip, rhythm = frame_aligned_streams(clips.audio[i:i + 1], cfg.frames_per_clip, fps, config.audio.token_rate_hz)
        lips.append(lip[0])
        rhythms.append(rhythm[0])
        head_masks, _ = site_masks(skeletons, cfg, head_mask_from_keypoints, config.audio.head_dilation)
        hand_masks, _ = site_masks(skeletons, cfg, hand_mask_from_keypoints, config.audio.hand_dilation)
        for site in cfg.site_resolutions:
            head[site].append(head_masks[site][0])
            hand[site].append(hand_masks[site][0])
        left, right = crop_hands(clips.frames[i, 0], skeletons[0], config.codebook.image_size, crop_px)
        lefts.append(left)
        rights.append(right)

    left_crops, right_crops = torch.stack(lefts), torch.stack(rights)
    hand_tokens = None
    if codebook_model is not None and not keep_crops:
        hand_tokens = embed_frozen_hands(left_crops, right_crops, codebook_model)
    return ClipConditions(
        latents=clips.latents,
        pose_maps=torch.stack(poses),
        lip=torch.stack(lips),
        rhythm=torch.stack(rhythms),
        head_mask={site: torch.stack(v) for site, v in head.items()},
        hand_mask={site: torch.stack(v) for site, v in hand.items()},
        hand_tokens=hand_tokens,
        left_crops=left_crops if keep_crops else None,
        right_crops=right_crops if keep_crops else None,
    )


def embed_frozen_hands(left: torch.Tensor, right: torch.Tensor, model: HandCodebookModel,
                       batch_size: int = 64) -> torch.Tensor:
    """Hand tokens [N, 2*Q*Q, D] from a frozen codebook."""
    if not model.is_pretrained:
        raise CheckpointError("hand codebook weights are missing; train or load a checkpoint first")
    model.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, left.shape[0], batch_size):
            tokens, _, _, _ = embed_hand_batch(left[start:start + batch_size], right[start:start + batch_size], model)
            chunks.append(tokens)
    return torch.cat(chunks)


def heldout_indices(model: HandCodebookModel, images: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
    model.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            _, _, indices, _ = model(images[start:start + batch_size])
            chunks.append(indices.reshape(-1))
    return torch.cat(chunks)


class _LossWindow:
    """Running means of loss terms between two CSV rows."""

    def __init__(self):
        self.sums: Dict[str, float] = {}
        self.count = 0

    def add(self, values: Dict[str, float]) -> None:
        for key, value in values.items():
            self.sums[key] = self.sums.get(key, 0.0) + float(value)
        self.count += 1

    def flush(self) -> Dict[str, float]:
        means = {key: total / max(self.count, 1) for key, total in self.sums.items()}
        self.sums, self.count = {}, 0
        return means


# --------------------------------------------------------------------------
# Service
# --------------------------------------------------------------------------

class TrainingService:
    """
    Dataset creation and stage training for one output root.

    Args:
        config: Resolved run config.
        output_root: Registry location; also the default home of run directories.
        run_root: Parent of the `train-<stage>` directories (defaults to `output_root`).
        data: Dataset locations (defaults to `<output_root>/data`).
        codebook_path: Explicit codebook checkpoint for the denoiser stages.
    """

    def __init__(
        self,
        config: RunConfig,
        output_root: Optional[Path] = None,
        run_root: Optional[Path] = None,
        data: Optional[DatasetPaths] = None,
        codebook_path: Optional[Path] = None,
    ):
        self.config = config
        self.output_root = Path(output_root) if output_root is not None else get_output_root()
        self.run_root = Path(run_root) if run_root is not None else self.output_root
        self.data = data or dataset_paths(self.output_root)
        self.codebook_path = Path(codebook_path) if codebook_path else codebook_checkpoint_path(self.run_root, config)

    def make_datasets(self) -> DatasetPaths:
        """Render train and held-out hands and clips into `data/`."""
        cfg = self.config.data
        with RunTracker(self.output_root, self.data.root, "make-data", self.config) as tracker:
            save_config(self.config, self.data.root)
            make_synthetic_hands(cfg.hands, cfg.num_hands, self.data.hands_train, "train")
            make_synthetic_hands(cfg.hands, cfg.num_heldout_hands, self.data.hands_heldout, "heldout")
            autoencoder = autoencoder_for(self.config)
            make_synthetic_clips(cfg.clips, self.config.audio, cfg.num_clips, self.data.clips_train, "train", autoencoder)
            make_synthetic_clips(
                cfg.clips, self.config.audio, cfg.num_heldout_clips, self.data.clips_heldout, "heldout", autoencoder,
            )
            tracker.add_outputs(["hands", "clips", CONFIG_FILE])
        return self.data

    def train(self, stage: TrainingStage, progress: Optional[ProgressCallback] = None) -> TrainingResult:
        """
        Train (or resume) one stage.

        Raises:
            ConfigError: If the run directory was created with a different config.
            CheckpointError: If a prerequisite checkpoint is missing.
            NonFiniteLossError: If the loss turns NaN; the last checkpoint is kept.
        """
        stage = TrainingStage(stage)
        run_dir = run_dir_for(self.run_root, stage)
        inputs = self._prerequisites(stage)
        resumed = self._check_resume(run_dir)
        with RunTracker(self.output_root, run_dir, "train", self.config, stage=stage.value, inputs=inputs) as tracker:
            save_config(self.config, run_dir)
            if stage is TrainingStage.CODEBOOK:
                steps, metrics = self._train_codebook(run_dir, tracker, progress)
            else:
                steps, metrics = self._train_denoiser(stage, run_dir, tracker, progress)
            tracker.add_metrics(metrics)
            tracker.add_outputs([CHECKPOINT_FILE, LOSS_FILE, CONFIG_FILE, ONLINE_CODEBOOK_FILE])
        logger.info("%s finished at step %d: %s", stage.value, steps, metrics)
        return TrainingResult(
            stage=stage,
            run_dir=run_dir,
            checkpoint=run_dir / CHECKPOINT_FILE,
            loss_csv=run_dir / LOSS_FILE,
            steps=steps,
            resumed=resumed,
            metrics=metrics,
        )

    # Private helper methods

    def _prerequisites(self, stage: TrainingStage) -> Dict[str, Path]:
        if stage is TrainingStage.CODEBOOK:
            self.data.require(self.data.hands_train, self.data.hands_heldout)
            return {"hands_train": self.data.hands_train}
        self.data.require(self.data.clips_train)
        inputs = {"clips_train": self.data.clips_train}
        needs_codebook = self.config.denoiser.use_hand_stream and not (
            stage is TrainingStage.STAGE1 and self.config.codebook.mode is CodebookMode.ONLINE
        )
        if needs_codebook:
            if not self.codebook_path.exists():
                raise CheckpointError(f"codebook checkpoint {self.codebook_path} not found; train the codebook stage first")
            inputs["codebook"] = self.codebook_path
        if stage is TrainingStage.STAGE2:
            stage1 = run_dir_for(self.run_root, TrainingStage.STAGE1) / CHECKPOINT_FILE
            if not stage1.exists():
                raise CheckpointError(f"stage-1 checkpoint {stage1} not found; train stage1 first")
            inputs["stage1"] = stage1
        return inputs

    def _check_resume(self, run_dir: Path) -> bool:
        config_file = run_dir / CONFIG_FILE
        if config_file.exists():
            stored = load_resolved(config_file)
            if stored.config_hash() != self.config.config_hash():
                raise ConfigError(
                    f"{run_dir} holds a run with a different config; use another output root"
                )
        return (run_dir / CHECKPOINT_FILE).exists()

    def _train_codebook(self, run_dir: Path, tracker: RunTracker,
                        progress: Optional[ProgressCallback]):
        config = self.config
        stage_cfg = config.training.codebook
        torch.manual_seed(config.seed)
        images = load_hand_images(self.data.hands_train)
        heldout = load_hand_images(self.data.hands_heldout)
        model = HandCodebookModel(config.codebook)
        state = make_training_state(model, stage_cfg.lr, stage_cfg.optimizer)
        data_gen = torch.Generator().manual_seed(config.seed)

        checkpoint = run_dir / CHECKPOINT_FILE
        if checkpoint.exists():
            payload = load_checkpoint(checkpoint, HCC_KIND)
            model.load_state_dict(payload["state"])
            state.optimizer.load_state_dict(payload["optimizer"])
            state.step = payload["step"]
            data_gen.set_state(payload["extra"]["data_rng"])
            extra = dict(payload["extra"])
            logger.info("resuming codebook training at step %d", state.step)
        else:
            extra = {"initial_mse": heldout_mse(model, heldout)}
        report = CsvReport(run_dir / LOSS_FILE, "loss", CODEBOOK_LOSS_COLUMNS)
        report.truncate_after(state.step)

        def save() -> None:
            extra["data_rng"] = data_gen.get_state()
            save_checkpoint(checkpoint, HCC_KIND, TrainingStage.CODEBOOK, config, model, state.optimizer, state.step, extra)

        window = _LossWindow()
        last_saved = state.step
        try:
            while state.step < stage_cfg.iterations:
                idx = torch.randint(images.shape[0], (stage_cfg.batch_size,), generator=data_gen)
                losses = vq_training_step(images[idx], state)
                window.add(losses.as_floats())
                if state.step % stage_cfg.log_every == 0 or state.step == stage_cfg.iterations:
                    report.append({"step": state.step, **window.flush()})
                if state.step % stage_cfg.checkpoint_every == 0 or state.step == stage_cfg.iterations:
                    model.mark_pretrained()
                    save()
                    last_saved = state.step
                if progress:
                    progress(state.step, stage_cfg.iterations)
        except NonFiniteLossError:
            logger.error("codebook loss diverged; keeping checkpoint from step %d", last_saved)
            tracker.note(f"aborted on non-finite loss; last good checkpoint at step {last_saved}")
            raise

        indices = heldout_indices(model, heldout)
        usage, perplexity = codebook_stats(indices, config.codebook.codebook_size)
        mse = heldout_mse(model, heldout)
        metrics = {
            "reconstruction_mse": mse,
            "initial_mse": float(extra["initial_mse"]),
            "codebook_usage": usage,
            "codebook_perplexity": perplexity,
        }
        return state.step, metrics

    def _train_denoiser(self, stage: TrainingStage, run_dir: Path, tracker: RunTracker,
                        progress: Optional[ProgressCallback]):
        config = self.config
        stage_cfg = getattr(config.training, stage.value)
        torch.manual_seed(config.seed)
        online = (
            stage is TrainingStage.STAGE1
            and config.codebook.mode is CodebookMode.ONLINE
            and config.denoiser.use_hand_stream
        )
        checkpoint = run_dir / CHECKPOINT_FILE
        online_file = run_dir / ONLINE_CODEBOOK_FILE
        resuming = checkpoint.exists()

        codebook_model = None
        if online:
            codebook_model = HandCodebookModel(config.codebook)
            if resuming:
                codebook_model.load_state_dict(load_checkpoint(online_file, HCC_KIND)["state"])
        elif config.denoiser.use_hand_stream:
            codebook_model = load_hand_codebook(self.codebook_path, config)

        clips = load_clips(self.data.clips_train)
        conditions = build_clip_conditions(clips, config, codebook_model, keep_crops=online)
        logger.info("prepared conditions for %d clips", len(conditions))

        model = Denoiser(config.denoiser, config.audio, config.codebook.code_dim, temporal=stage is TrainingStage.STAGE2)
        if stage is TrainingStage.STAGE2 and not resuming:
            stage1 = run_dir_for(self.run_root, TrainingStage.STAGE1) / CHECKPOINT_FILE
            load_denoiser_state(model, load_checkpoint(stage1, DENOISER_KIND))
        schedule = build_schedule(config.schedule.num_steps, config.schedule.beta_start, config.schedule.beta_end)
        state = make_denoiser_training_state(
            model, schedule, stage, stage_cfg, seed=config.seed,
            codebook_model=codebook_model, online_codebook=online,
        )
        data_gen = torch.Generator().manual_seed(config.seed + 1)

        extra: Dict = {}
        if resuming:
            payload = load_checkpoint(checkpoint, DENOISER_KIND)
            if TrainingStage(payload["stage"]) is not stage:
                raise CheckpointError(f"{checkpoint} is a {payload['stage']} checkpoint, expected {stage.value}")
            load_denoiser_state(model, payload)
            state.optimizer.load_state_dict(payload["optimizer"])
            state.step = payload["step"]
            extra = dict(payload["extra"])
            data_gen.set_state(extra["data_rng"])
            state.generator.set_state(extra["train_rng"])
            logger.info("resuming %s at step %d", stage.value, state.step)
        report = CsvReport(run_dir / LOSS_FILE, "loss", DENOISER_LOSS_COLUMNS)
        report.truncate_after(state.step)

        def save() -> None:
            extra["data_rng"] = data_gen.get_state()
            extra["train_rng"] = state.generator.get_state()
            save_checkpoint(checkpoint, DENOISER_KIND, stage, config, model, state.optimizer, state.step, extra)
            if online:
                codebook_model.mark_pretrained()
                save_checkpoint(online_file, HCC_KIND, stage, config, codebook_model, step=state.step)

        window = _LossWindow()
        last_saved = state.step
        n, frames = len(conditions), conditions.frames
        try:
            while state.step < stage_cfg.iterations:
                clip_idx = torch.randint(n, (stage_cfg.batch_size,), generator=data_gen)
                if stage is TrainingStage.STAGE1:
                    frame_idx = torch.randint(frames, (stage_cfg.batch_size,), generator=data_gen)
                    step = train_step_stage1(conditions.frame_batch(clip_idx, frame_idx), state)
                else:
                    step = train_step_stage2(conditions.clip_batch(clip_idx), state)
                window.add({"loss": step.loss, "noise": step.noise, "vq": step.vq})
                if state.step % stage_cfg.log_every == 0 or state.step == stage_cfg.iterations:
                    row = window.flush()
                    extra.setdefault("first_loss", row["loss"])
                    extra["last_loss"] = row["loss"]
                    report.append({"step": state.step, **row})
                if state.step % stage_cfg.checkpoint_every == 0 or state.step == stage_cfg.iterations:
                    save()
                    last_saved = state.step
                if progress:
                    progress(state.step, stage_cfg.iterations)
        except NonFiniteLossError:
            logger.error("%s loss diverged; keeping checkpoint from step %d", stage.value, last_saved)
            tracker.note(f"aborted on non-finite loss; last good checkpoint at step {last_saved}")
            raise

        metrics = {}
        if "first_loss" in extra:
            metrics["first_loss"] = float(extra["first_loss"])
            metrics["final_loss"] = float(extra["last_loss"])
        if online:
            counts = codebook_model.quantizer.usage_counts
            metrics["codebook_usage"] = float((counts > 0).float().mean())
        return state.step, metrics


def run_training(
    config: RunConfig,
    stage: TrainingStage,
    output_root: Optional[Path] = None,
    progress: Optional[ProgressCallback] = None,
) -> TrainingResult:
    """Train one stage under `output_root` (default: VIVID_OUTPUT_ROOT)."""
    return TrainingService(config, output_root).train(stage, progress)


def make_datasets(config: RunConfig, output_root: Optional[Path] = None) -> DatasetPaths:
    return TrainingService(config, output_root).make_datasets()
