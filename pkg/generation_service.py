"""
Generation, calibration reports, metric evaluation and the ablation grid.

Generation calibrates the driving skeleton against the reference, renders
pose maps, builds every condition, samples a clip with classifier-free
guidance and decodes it with the toy autoencoder. Motion metrics come from
keypoint arrays only: HKV from the calibrated driving hands, HMV from the
head tracked in the decoded frames.
"""
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image

from audio_streams import (
    frame_aligned_streams,
    hand_mask_from_keypoints,
    head_mask_from_keypoints,
    synth_audio_features,
    validate_audio_features,
)
from checkpoint_manager import load_denoiser, load_hand_codebook
from config_manager import ConfigManager, GuidanceConfig, RunConfig, get_output_root, save_config
from denoiser import ConditioningBundle, Denoiser, guided_eps, site_masks
from diffusion_core import build_schedule, sample_loop
from enums import CodebookMode, TrainingStage
from errors import ConfigError, NonFiniteLossError, ShapeError
from hand_codebook import HandCodebookModel, codebook_stats, heldout_mse
from keypoint_io import read_keypoints, write_keypoints
from metrics import MetricReport, hand_sequence, head_sequence, hkv, hmv
from pose_calibration import (
    CalibrationParams,
    Skeleton2D,
    calibrate_sequence,
    segment_graph_from,
    segment_length_error,
    torso_center,
)
from report_generator import save_image_grid, write_csv_report
from run_manager import CONFIG_FILE, RunTracker
from synthetic_data import (
    ClipSet,
    crop_hands,
    images_to_tensor,
    load_clips,
    load_hand_images,
    render_pose_maps,
    track_colour_centroids,
)
from training_service import (
    CHECKPOINT_FILE,
    DatasetPaths,
    ProgressCallback,
    TrainingService,
    autoencoder_for,
    codebook_checkpoint_path,
    dataset_paths,
    embed_frozen_hands,
    hand_crop_px,
    heldout_indices,
    run_dir_for,
)

logger = logging.getLogger(__name__)

LATENTS_FILE = "latents.npy"
GRID_FILE = "frames.png"
METRICS_FILE = "metrics.csv"
CALIBRATION_FILE = "calibration.csv"
DRIVING_FILE = "driving.json"
ABLATION_DIR = "ablate"
ABLATION_FILE = "ablation.csv"

CALIBRATION_COLUMNS = (
    "frame", "segment_error_before", "segment_error_after",
    "center_offset_before", "center_offset_after", "r_x", "r_y", "dx", "dy",
)
ABLATION_COLUMNS = (
    "variant", "grid", "codebook_mode", "head_stream", "hand_stream", "pct",
    "reconstruction_mse", "codebook_usage", "codebook_perplexity",
    "hkv", "hmv", "script_hmv", "calibration_error", "seed",
)


@dataclass
class GenerationInputs:
    """
    Everything a generation run consumes.

    Attributes:
        reference_frame: [3, H, W] reference image in [-1, 1].
        reference_skeleton: Keypoints of the reference image.
        driving: Driving skeleton per frame (at least frames_per_clip).
        audio: [1, F_win, T, D] audio features.
        script_head: [F, 2] scripted head centre that produced the audio, if known.
        sources: Input files, hashed into the run manifest.
    """
    reference_frame: torch.Tensor
    reference_skeleton: Skeleton2D
    driving: List[Skeleton2D]
    audio: torch.Tensor
    script_head: Optional[np.ndarray] = None
    sources: Dict[str, Path] = field(default_factory=dict)


@dataclass
class GenerationResult:
    run_dir: Path
    latents: torch.Tensor
    frames: torch.Tensor
    report: MetricReport
    output_hash: str
    calibrated: bool
    calibration_error: float
    notes: List[str] = field(default_factory=list)


def inputs_from_clips(clips: ClipSet, reference: int, driving: Optional[int] = None,
                      sources: Optional[Dict[str, Path]] = None) -> GenerationInputs:
    """
    Reference frame, audio and scripted head from clip `reference`; driving
    skeletons from clip `driving` (defaults to the same clip).
    """
    if not 0 <= reference < len(clips):
        raise ValueError(f"clip index {reference} out of range (0..{len(clips) - 1})")
    driving = reference if driving is None else driving
    if not 0 <= driving < len(clips):
        raise ValueError(f"clip index {driving} out of range (0..{len(clips) - 1})")
    return GenerationInputs(
        reference_frame=clips.frames[reference, 0],
        reference_skeleton=clips.skeletons(reference)[0],
        driving=clips.skeletons(driving),
        audio=clips.audio[reference:reference + 1],
        script_head=clips.head_track[reference],
        sources=sources or {},
    )


def load_reference_image(path: Path, frame_size: int) -> torch.Tensor:
    """RGB image file -> [3, S, S] in [-1, 1]."""
    with Image.open(path) as image:
        rgb = image.convert("RGB").resize((frame_size, frame_size), Image.BILINEAR)
        return images_to_tensor(np.asarray(rgb)[None])[0]


def load_audio_features(path: Path) -> torch.Tensor:
    """A .npy array [F_win, T, D] or [1, F_win, T, D]."""
    array = np.load(path)
    if array.ndim == 3:
        array = array[None]
    return torch.from_numpy(np.ascontiguousarray(array, dtype=np.float32))


def inputs_from_files(
    config: RunConfig,
    reference_image: Path,
    reference_keypoints: Path,
    driving_keypoints: Path,
    audio: Optional[Path] = None,
    rhythm_hz: float = 2.0,
    rhythm_amplitude: float = 1.0,
    audio_seed: int = 0,
) -> GenerationInputs:
    """
    Load generation inputs from files; without an audio file the features
    are synthesized from rhythm parameters.
    """
    refs, _ = read_keypoints(reference_keypoints)
    if not refs:
        raise ConfigError(f"{reference_keypoints} holds no frames")
    driving, _ = read_keypoints(driving_keypoints)
    sources = {
        "reference_image": Path(reference_image),
        "reference_keypoints": Path(reference_keypoints),
        "driving_keypoints": Path(driving_keypoints),
    }
    if audio is not None:
        features = load_audio_features(audio)
        sources["audio"] = Path(audio)
    else:
        features = synth_audio_features(
            audio_seed, rhythm_hz, config.audio.tokens, window=config.audio.window, dim=config.audio.dim,
            amplitude=rhythm_amplitude, noise=config.data.clips.audio_noise, token_rate_hz=config.audio.token_rate_hz,
        )
    return GenerationInputs(
        reference_frame=load_reference_image(reference_image, config.denoiser.frame_size),
        reference_skeleton=refs[0],
        driving=driving,
        audio=features,
        sources=sources,
    )


def calibration_rows(
    reference: Skeleton2D,
    driving: List[Skeleton2D],
    calibrated: Optional[List[Skeleton2D]] = None,
    params: Optional[List[CalibrationParams]] = None,
    threshold: float = 0.3,
) -> List[Dict[str, float]]:
    """Per-frame segment-length error and torso-centre offset, before and after calibration."""
    graph = segment_graph_from(reference)
    centre = torso_center(reference, threshold)
    rows = []
    for i, skel in enumerate(driving):
        row: Dict[str, float] = {
            "frame": i,
            "segment_error_before": segment_length_error(skel, graph),
            "center_offset_before": float(np.linalg.norm(torso_center(skel, threshold) - centre)),
        }
        if calibrated is not None:
            row["segment_error_after"] = segment_length_error(calibrated[i], graph)
            row["center_offset_after"] = float(np.linalg.norm(torso_center(calibrated[i], threshold) - centre))
        if params is not None:
            p = params[i]
            row.update({"r_x": p.r_x, "r_y": p.r_y, "dx": p.delta[0], "dy": p.delta[1]})
        rows.append(row)
    return rows


def latent_hash(latents: torch.Tensor) -> str:
    array = np.ascontiguousarray(latents.detach().cpu().numpy().astype(np.float32))
    return hashlib.sha256(array.tobytes()).hexdigest()


class GenerationService:
    """
    Samples clips from trained checkpoints under one run root.

    Args:
        config: Resolved run config; its denoiser section must match the checkpoint.
        output_root: Registry location.
        run_root: Parent of the `train-<stage>` directories (defaults to `output_root`).
        codebook_path: Explicit codebook checkpoint.
    """

    def __init__(
        self,
        config: RunConfig,
        output_root: Optional[Path] = None,
        run_root: Optional[Path] = None,
        codebook_path: Optional[Path] = None,
    ):
        self.config = config
        self.output_root = Path(output_root) if output_root is not None else get_output_root()
        self.run_root = Path(run_root) if run_root is not None else self.output_root
        self.codebook_path = Path(codebook_path) if codebook_path else codebook_checkpoint_path(self.run_root, config)
        self.denoiser_path = run_dir_for(self.run_root, TrainingStage.STAGE2) / CHECKPOINT_FILE
        self._models: Optional[Tuple[Denoiser, Optional[HandCodebookModel]]] = None

    def load_models(self) -> Tuple[Denoiser, Optional[HandCodebookModel]]:
        """
        Load the stage-2 denoiser and, when the hand stream is on, the codebook.

        Raises:
            CheckpointError: If a checkpoint is missing.
            ConfigError: If the checkpoint was trained with another denoiser config.
        """
        if self._models is None:
            model = load_denoiser(self.denoiser_path)
            if model.cfg != self.config.denoiser:
                raise ConfigError(f"{self.denoiser_path} was trained with a different denoiser config")
            model.eval()
            codebook = None
            if self.config.denoiser.use_hand_stream:
                codebook = load_hand_codebook(self.codebook_path, self.config)
            self._models = (model, codebook)
        return self._models

    def generate(
        self,
        inputs: GenerationInputs,
        seed: Optional[int] = None,
        calibrate: Optional[bool] = None,
        guidance: Optional[GuidanceConfig] = None,
        run_dir: Optional[Path] = None,
    ) -> GenerationResult:
        """
        Generate one clip and write latents, a frame grid, metrics and diagnostics.

        Args:
            inputs: Reference, driving skeletons and audio.
            seed: Sampling seed (defaults to the config seed).
            calibrate: Run pose calibration (defaults to `calibration.enabled`).
            guidance: Guidance scales (defaults to the config's).
            run_dir: Output directory (defaults to `<run_root>/generate`).

        Raises:
            ShapeError: If fewer driving frames than frames_per_clip are given.
            NonFiniteLossError: If sampling produced non-finite latents.
        """
        config = self.config
        cfg = config.denoiser
        frames = cfg.frames_per_clip
        seed = config.seed if seed is None else seed
        calibrate = config.calibration.enabled if calibrate is None else calibrate
        guidance = guidance or config.guidance
        run_dir = Path(run_dir) if run_dir is not None else self.run_root / "generate"
        threshold = config.calibration.confidence_threshold
        if len(inputs.driving) < frames:
            raise ShapeError(f"need {frames} driving frames, got {len(inputs.driving)}")
        validate_audio_features(inputs.audio, config.audio)
        driving = inputs.driving[:frames]

        model, codebook = self.load_models()
        sources = dict(inputs.sources)
        sources["denoiser"] = self.denoiser_path
        if codebook is not None:
            sources["codebook"] = self.codebook_path

        with RunTracker(self.output_root, run_dir, "generate", config, inputs=sources) as tracker:
            save_config(config, run_dir)
            notes: List[str] = []
            if calibrate:
                pose, params = calibrate_sequence(inputs.reference_skeleton, driving, threshold)
            else:
                pose, params = list(driving), None
                notes.append("pose calibration skipped: driving skeleton used uncalibrated")
                logger.warning("pose calibration disabled; driving skeleton is used as given")
            rows = calibration_rows(inputs.reference_skeleton, driving, pose if calibrate else None, params, threshold)
            write_csv_report(run_dir / CALIBRATION_FILE, "calibration", rows, CALIBRATION_COLUMNS)
            write_keypoints(run_dir / DRIVING_FILE, pose, (cfg.frame_size, cfg.frame_size))
            calibration_error = float(np.mean(
                [r["segment_error_after" if calibrate else "segment_error_before"] for r in rows]
            ))

            bundle, mask_warning = self._bundle(inputs, pose, model, codebook)
            if mask_warning:
                notes.append("some frames lack face keypoints; head mask fell back to all zeros")

            schedule = build_schedule(config.schedule.num_steps, config.schedule.beta_start, config.schedule.beta_end)
            generator = torch.Generator().manual_seed(seed)
            shape = (1, frames, cfg.latent_channels, cfg.latent_size, cfg.latent_size)
            with torch.no_grad():
                latents = sample_loop(
                    lambda z, t: guided_eps(model, z, t, bundle, guidance), shape, schedule, generator,
                )[0]
            if not torch.isfinite(latents).all():
                raise NonFiniteLossError("sampling produced non-finite latents")
            decoded = autoencoder_for(config).decode(latents).clamp(-1.0, 1.0)

            np.save(run_dir / LATENTS_FILE, latents.numpy().astype(np.float32))
            save_image_grid(decoded, run_dir / GRID_FILE, columns=min(frames, 6))
            tracked = track_colour_centroids(decoded)
            report = MetricReport(
                hkv=hkv(hand_sequence(pose)),
                hmv=hmv(tracked.head),
                script_hmv=hmv(inputs.script_head[:frames]) if inputs.script_head is not None else None,
                metadata={
                    "seed": seed,
                    "pct": calibrate,
                    "audio_scale": guidance.audio_scale,
                    "image_scale": guidance.image_scale,
                    "calibration_error": calibration_error,
                    "config_hash": config.config_hash(),
                },
            )
            output_hash = latent_hash(latents)
            report.metadata["output_hash"] = output_hash
            write_csv_report(
                run_dir / METRICS_FILE, "metrics",
                [{"metric": k, "value": v} for k, v in report.scalars().items()]
                + [{"metric": "calibration_error", "value": calibration_error}],
                ("metric", "value"),
            )
            tracker.add_metrics({**report.scalars(), "calibration_error": calibration_error})
            for note in notes:
                tracker.note(note)
            tracker.add_outputs([LATENTS_FILE, GRID_FILE, METRICS_FILE, CALIBRATION_FILE, DRIVING_FILE, CONFIG_FILE])
        logger.info("generated %d frames into %s (hash %s)", frames, run_dir, output_hash[:12])
        return GenerationResult(
            run_dir=run_dir,
            latents=latents,
            frames=decoded,
            report=report,
            output_hash=output_hash,
            calibrated=calibrate,
            calibration_error=calibration_error,
            notes=notes,
        )

    # Private helper methods

    def _bundle(self, inputs: GenerationInputs, pose: List[Skeleton2D], model: Denoiser,
                codebook: Optional[HandCodebookModel]) -> Tuple[ConditioningBundle, bool]:
        config = self.config
        cfg = config.denoiser
        lip, rhythm = frame_aligned_streams(inputs.audio, cfg.frames_per_clip, config.data.clips.fps,
                                            config.audio.token_rate_hz)
        head, warned = site_masks(pose, cfg, head_mask_from_keypoints, config.audio.head_dilation)
        hand, _ = site_masks(pose, cfg, hand_mask_from_keypoints, config.audio.hand_dilation)
        hand_tokens = None
        if codebook is not None:
            left, right = crop_hands(inputs.reference_frame, inputs.reference_skeleton,
                                     config.codebook.image_size, hand_crop_px(cfg.frame_size))
            hand_tokens = embed_frozen_hands(left[None], right[None], codebook)
        bundle = ConditioningBundle(
            pose_maps=render_pose_maps(pose, cfg.frame_size)[None],
            reference_image=autoencoder_for(config).encode(inputs.reference_frame)[None],
            hand_tokens=hand_tokens,
            lip=lip,
            rhythm=rhythm,
            head_mask=head,
            hand_mask=hand,
        )
        return bundle, warned


def run_generate(
    config: RunConfig,
    inputs: GenerationInputs,
    output_root: Optional[Path] = None,
    seed: Optional[int] = None,
    calibrate: Optional[bool] = None,
    guidance: Optional[GuidanceConfig] = None,
    run_dir: Optional[Path] = None,
) -> GenerationResult:
    return GenerationService(config, output_root).generate(inputs, seed, calibrate, guidance, run_dir)


# --------------------------------------------------------------------------
# Calibration and metric commands
# --------------------------------------------------------------------------

@dataclass
class CalibrationOutcome:
    frames: List[Skeleton2D]
    rows: List[Dict[str, float]]
    output: Path


def run_calibration(
    reference: Path,
    driving: Path,
    output: Path,
    report: Optional[Path] = None,
    threshold: float = 0.3,
) -> CalibrationOutcome:
    """
    Calibrate a driving keypoint file against frame 0 of a reference file.

    Raises:
        ConfigError: If either file holds no frames.
    """
    refs, size = read_keypoints(reference)
    if not refs:
        raise ConfigError(f"{reference} holds no frames")
    frames, _ = read_keypoints(driving)
    if not frames:
        raise ConfigError(f"{driving} holds no frames")
    calibrated, params = calibrate_sequence(refs[0], frames, threshold)
    write_keypoints(output, calibrated, size)
    rows = calibration_rows(refs[0], frames, calibrated, params, threshold)
    if report is not None:
        write_csv_report(report, "calibration", rows, CALIBRATION_COLUMNS)
    return CalibrationOutcome(frames=calibrated, rows=rows, output=Path(output))


def evaluate_metrics(
    keypoints: Optional[Path] = None,
    checkpoint: Optional[Path] = None,
    hands: Optional[Path] = None,
) -> MetricReport:
    """
    HKV/HMV from a keypoint file and codebook quality of a checkpoint over a hand dataset.

    Raises:
        ConfigError: If neither input is given, or a checkpoint comes without hands.
    """
    if keypoints is None and checkpoint is None:
        raise ConfigError("give a keypoint file, a codebook checkpoint, or both")
    report = MetricReport()
    if keypoints is not None:
        frames, _ = read_keypoints(keypoints)
        report.hkv = hkv(hand_sequence(frames))
        report.hmv = hmv(head_sequence(frames))
        report.metadata["keypoints"] = str(keypoints)
    if checkpoint is not None:
        if hands is None:
            raise ConfigError("codebook metrics need a hand dataset")
        model = load_hand_codebook(checkpoint)
        images = load_hand_images(hands)
        usage, perplexity = codebook_stats(heldout_indices(model, images), model.cfg.codebook_size)
        report.reconstruction_mse = heldout_mse(model, images)
        report.codebook_usage = usage
        report.codebook_perplexity = perplexity
        report.metadata["checkpoint"] = str(checkpoint)
    return report


# --------------------------------------------------------------------------
# Ablation grid
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AblationVariant:
    """
    One row of the ablation grid.

    Variants without `generate` only train and score a codebook.
    """
    name: str
    grid: int
    mode: CodebookMode = CodebookMode.OFFLINE
    head_stream: bool = True
    hand_stream: bool = True
    pct: bool = True
    generate: bool = True

    @property
    def model_key(self) -> Tuple:
        return (self.grid, self.mode, self.head_stream, self.hand_stream)


def ablation_variants(config: RunConfig, only: Optional[Sequence[str]] = None) -> List[AblationVariant]:
    """
    The grid's rows in order, optionally restricted to the named ones.

    Raises:
        ConfigError: If `only` names a variant the grid does not have.
    """
    variants = _all_variants(config)
    if not only:
        return variants
    known = [v.name for v in variants]
    unknown = sorted(set(only) - set(known))
    if unknown:
        raise ConfigError(f"unknown ablation variants {unknown}; choose from {known}")
    return [v for v in variants if v.name in set(only)]


def _all_variants(config: RunConfig) -> List[AblationVariant]:
    base = config.codebook.grid_size
    variants = [
        AblationVariant("baseline", base),
        AblationVariant("no_hcc", base, hand_stream=False),
        AblationVariant("no_head", base, head_stream=False),
    ]
    for grid in config.ablation.grids:
        if grid != base:
            variants.append(AblationVariant(f"grid_{grid}", grid, generate=False))
    if config.ablation.include_online:
        variants.append(AblationVariant(f"online_{base}", base, mode=CodebookMode.ONLINE))
    variants.append(AblationVariant("no_pct", base, pct=False))
    return variants


def ablation_budget(config: RunConfig) -> RunConfig:
    """The config with the ablation's shorter training budgets."""
    data = config.model_dump(mode="json")
    budgets = config.ablation
    for stage, iterations in (
        ("codebook", budgets.codebook_iterations),
        ("stage1", budgets.stage1_iterations),
        ("stage2", budgets.stage2_iterations),
    ):
        data["training"][stage]["iterations"] = iterations
        data["training"][stage]["checkpoint_every"] = min(data["training"][stage]["checkpoint_every"], iterations)
    return ConfigManager.validate(data)


def variant_config(config: RunConfig, variant: AblationVariant) -> RunConfig:
    data = config.model_dump(mode="json")
    data["codebook"]["grid_size"] = variant.grid
    data["codebook"]["mode"] = variant.mode.value
    data["denoiser"]["use_head_stream"] = variant.head_stream
    data["denoiser"]["use_hand_stream"] = variant.hand_stream
    return ConfigManager.validate(data)


def _codebook_row(model: HandCodebookModel, images: torch.Tensor) -> Dict[str, float]:
    usage, perplexity = codebook_stats(heldout_indices(model, images), model.cfg.codebook_size)
    return {
        "reconstruction_mse": heldout_mse(model, images),
        "codebook_usage": usage,
        "codebook_perplexity": perplexity,
    }


class AblationRunner:
    """
    Trains and evaluates every ablation variant with identical seeds.

    Codebooks are shared by variants with the same grid; denoisers by
    variants with the same model topology (the "no_pct" row reuses the
    baseline models and only changes generation).
    """

    def __init__(self, config: RunConfig, output_root: Optional[Path] = None,
                 progress: Optional[ProgressCallback] = None, variants: Optional[Sequence[str]] = None):
        self.config = ablation_budget(config)
        self.variants = ablation_variants(self.config, variants)
        self.output_root = Path(output_root) if output_root is not None else get_output_root()
        self.root = self.output_root / ABLATION_DIR
        self.data: DatasetPaths = dataset_paths(self.output_root)
        self.progress = progress
        self._codebooks: Dict[int, Tuple[Path, Dict[str, float]]] = {}
        self._models: Dict[Tuple, Path] = {}

    def run(self) -> Tuple[Path, List[Dict]]:
        self.data.require(self.data.hands_train, self.data.hands_heldout, self.data.clips_train, self.data.clips_heldout)
        heldout_hands = load_hand_images(self.data.hands_heldout)
        heldout_clips = load_clips(self.data.clips_heldout)
        rows = []
        with RunTracker(self.output_root, self.root, "ablate", self.config) as tracker:
            save_config(self.config, self.root)
            for variant in self.variants:
                logger.info("ablation variant %s", variant.name)
                row = self._run_variant(variant, heldout_hands, heldout_clips)
                rows.append(row)
                numeric = {k: v for k, v in row.items() if isinstance(v, float)}
                tracker.add_metrics(numeric, variant=variant.name)
            path = write_csv_report(self.root / ABLATION_FILE, "ablation", rows, ABLATION_COLUMNS)
            tracker.add_outputs([ABLATION_FILE, CONFIG_FILE])
        return path, rows

    # Private helper methods

    def _run_variant(self, variant: AblationVariant, hands: torch.Tensor, clips: ClipSet) -> Dict:
        config = variant_config(self.config, variant)
        row: Dict = {
            "variant": variant.name,
            "grid": variant.grid,
            "codebook_mode": variant.mode.value,
            "head_stream": variant.head_stream,
            "hand_stream": variant.hand_stream,
            "pct": variant.pct,
            "seed": config.seed,
        }
        codebook_path = None
        if variant.mode is CodebookMode.OFFLINE and (variant.hand_stream or not variant.generate):
            codebook_path, codebook_metrics = self._codebook(config, hands)
            row.update(codebook_metrics)
        if not variant.generate:
            return row

        run_root = self._denoiser(variant, config, codebook_path)
        service = GenerationService(config, self.output_root, run_root, codebook_path)
        if variant.mode is CodebookMode.ONLINE:
            _, codebook = service.load_models()
            row.update(_codebook_row(codebook, hands))
        results = []
        for i in range(len(clips)):
            inputs = inputs_from_clips(clips, i, (i + 1) % len(clips), {"clips_heldout": self.data.clips_heldout})
            results.append(service.generate(
                inputs, seed=config.seed, calibrate=variant.pct,
                run_dir=self.root / variant.name / f"generate-clip{i}",
            ))
        row["hkv"] = float(np.mean([r.report.hkv for r in results]))
        row["hmv"] = float(np.mean([r.report.hmv for r in results]))
        row["script_hmv"] = float(np.mean([r.report.script_hmv for r in results]))
        row["calibration_error"] = float(np.mean([r.calibration_error for r in results]))
        return row

    def _codebook(self, config: RunConfig, hands: torch.Tensor) -> Tuple[Path, Dict[str, float]]:
        grid = config.codebook.grid_size
        if grid not in self._codebooks:
            run_root = self.root / f"codebook-{grid}"
            result = TrainingService(config, self.output_root, run_root, self.data).train(
                TrainingStage.CODEBOOK, self.progress,
            )
            model = load_hand_codebook(result.checkpoint, config)
            self._codebooks[grid] = (result.checkpoint, _codebook_row(model, hands))
        return self._codebooks[grid]

    def _denoiser(self, variant: AblationVariant, config: RunConfig, codebook_path: Optional[Path]) -> Path:
        if variant.model_key not in self._models:
            run_root = self.root / variant.name
            service = TrainingService(config, self.output_root, run_root, self.data, codebook_path)
            service.train(TrainingStage.STAGE1, self.progress)
            service.train(TrainingStage.STAGE2, self.progress)
            self._models[variant.model_key] = run_root
        return self._models[variant.model_key]


def run_ablation_grid(config: RunConfig, output_root: Optional[Path] = None,
                      progress: Optional[ProgressCallback] = None,
                      variants: Optional[Sequence[str]] = None) -> Tuple[Path, List[Dict]]:
    """Train and score the variants (all by default); returns the comparison CSV path and its rows."""
    return AblationRunner(config, output_root, progress, variants).run()
