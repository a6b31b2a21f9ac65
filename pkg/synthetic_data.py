"""
Synthetic data for desk-scale runs: procedurally rendered hand crops for
the codebook, and talking-upper-body clips whose head nods with the audio
rhythm while the hands follow scripted trajectories.

Also holds the dataset container format, the fixed toy autoencoder that
maps frames to the denoiser's latent space, pose-map rendering, hand
cropping and the colour-signature tracker used to measure motion in
generated frames.
"""
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw
from pydantic import BaseModel, ConfigDict, ValidationError

from audio_streams import rhythm_envelope, synth_audio_features
from config_manager import AudioConfig, SyntheticClipSpec, SyntheticHandSpec
from errors import ConfigError, SchemaVersionError, ShapeError
from pose_calibration import (
    CANONICAL_JOINTS,
    CANONICAL_SEGMENTS,
    FACE_JOINTS,
    FACE_KEYPOINTS,
    FINGER_CHAINS,
    HAND_KEYPOINTS,
    Joint,
    Skeleton2D,
    face_joint,
    hand_joint,
)

logger = logging.getLogger(__name__)

CONTAINER_SCHEMA_VERSION = 1
HEADER_FILE = "header.json"
SPLIT_IDS = {"train": 0, "heldout": 1}

# Sprite colours; the tracker keys on them.
BACKGROUND_RGB = (40, 40, 48)
TORSO_RGB = (60, 80, 200)
LIMB_RGB = (170, 170, 170)
HEAD_RGB = (220, 40, 40)
HAND_RGB = (40, 200, 60)
HEAD_RADIUS = 7.0
HAND_RADIUS = 4.0


# --------------------------------------------------------------------------
# Dataset containers
# --------------------------------------------------------------------------

class ArrayInfo(BaseModel):
    model_config = ConfigDict(extra="forbid")

    file: str
    shape: List[int]
    dtype: str


class DatasetHeader(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schema_version: int
    kind: str
    seed: int
    spec: Dict[str, Any]
    arrays: Dict[str, ArrayInfo]


def write_container(
    directory: Path,
    kind: str,
    spec: Dict[str, Any],
    seed: int,
    arrays: Dict[str, np.ndarray],
) -> Path:
    """
    Write a dataset directory: `header.json` plus one `.npy` file per array.

    Output bytes depend only on the inputs.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    infos = {}
    for name in sorted(arrays):
        array = np.ascontiguousarray(arrays[name])
        filename = f"{name}.npy"
        np.save(directory / filename, array, allow_pickle=False)
        infos[name] = ArrayInfo(file=filename, shape=list(array.shape), dtype=str(array.dtype))
    header = DatasetHeader(
        schema_version=CONTAINER_SCHEMA_VERSION, kind=kind, seed=seed, spec=spec, arrays=infos,
    )
    with open(directory / HEADER_FILE, "w", encoding="utf-8") as f:
        json.dump(header.model_dump(mode="json"), f, indent=2, sort_keys=True)
    return directory


def read_container(directory: Path, kind: Optional[str] = None) -> Tuple[DatasetHeader, Dict[str, np.ndarray]]:
    """
    Load a dataset directory and check every array against its header.

    Raises:
        ConfigError: If the directory or header is missing or malformed.
        SchemaVersionError: On an unknown schema version or unexpected kind.
        ShapeError: If an array does not match its declared shape or dtype.
    """
    directory = Path(directory)
    header_path = directory / HEADER_FILE
    if not header_path.exists():
        raise ConfigError(f"No dataset at {directory} (missing {HEADER_FILE})")
    try:
        with open(header_path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Malformed dataset header {header_path}: {e}") from e
    if raw.get("schema_version") != CONTAINER_SCHEMA_VERSION:
        raise SchemaVersionError(
            f"{header_path}: unsupported container version {raw.get('schema_version')!r}"
        )
    try:
        header = DatasetHeader.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"Malformed dataset header {header_path}: {e}") from e
    if kind is not None and header.kind != kind:
        raise SchemaVersionError(f"{directory} holds a '{header.kind}' dataset, expected '{kind}'")

    arrays = {}
    for name, info in header.arrays.items():
        array = np.load(directory / info.file, allow_pickle=False)
        if list(array.shape) != info.shape or str(array.dtype) != info.dtype:
            raise ShapeError(
                f"{name}: header says {info.shape}/{info.dtype}, file has {list(array.shape)}/{array.dtype}"
            )
        arrays[name] = array
    return header, arrays


# --------------------------------------------------------------------------
# Hands
# --------------------------------------------------------------------------

# Finger slot angles in degrees from "up"; the first slot is the thumb.
FINGER_SLOTS_DEG = (-70.0, -25.0, -8.0, 8.0, 25.0)


def _capsule(draw: ImageDraw.ImageDraw, p0, p1, width: float, fill) -> None:
    r = width / 2.0
    draw.line([tuple(p0), tuple(p1)], fill=fill, width=max(1, int(round(width))))
    for p in (p0, p1):
        draw.ellipse([p[0] - r, p[1] - r, p[0] + r, p[1] + r], fill=fill)


@dataclass
class FingerPose:
    angle: float
    tip_angle: float
    length: float
    width: float


@dataclass
class HandPose:
    """Everything drawn for one hand except the texture noise."""
    background: Tuple[int, int, int]
    skin: Tuple[int, int, int]
    palm_rx: float
    palm_ry: float
    fingers: List[FingerPose]

    def finger_angles(self) -> List[Tuple[float, float]]:
        """(base, tip) angle in radians from "up" for each finger, thumb side first."""
        return [(f.angle, f.tip_angle) for f in self.fingers]


def sample_hand_pose(spec: SyntheticHandSpec, rng: np.random.Generator) -> HandPose:
    size = spec.image_size
    background = tuple(int(v) for v in rng.uniform(20, 80, size=3))
    skin = tuple(int(v) for v in rng.uniform((150, 100, 80), (240, 190, 160)))
    ry = rng.uniform(*spec.palm_radius_range) * size
    rx = ry * rng.uniform(*spec.palm_aspect_range)

    lo, hi = spec.finger_count_range
    count = int(rng.integers(lo, hi + 1))
    slots = FINGER_SLOTS_DEG[len(FINGER_SLOTS_DEG) - count:] if count <= len(FINGER_SLOTS_DEG) else FINGER_SLOTS_DEG
    fingers = []
    for base in slots:
        angle = math.radians(base) + spec.articulation_range * rng.uniform(-1.0, 1.0) * 0.5
        bend = spec.articulation_range * rng.uniform(0.0, 1.0) * 0.5
        fingers.append(FingerPose(
            angle=angle,
            tip_angle=angle + math.copysign(bend, base if base else 1.0),
            length=rng.uniform(*spec.finger_length_range) * size,
            width=rng.uniform(*spec.finger_width_range) * size,
        ))
    return HandPose(background=background, skin=skin, palm_rx=rx, palm_ry=ry, fingers=fingers)


def render_hand(spec: SyntheticHandSpec, rng: np.random.Generator) -> np.ndarray:
    """One textured hand-like image, uint8 [S, S, 3]."""
    size = spec.image_size
    pose = sample_hand_pose(spec, rng)
    skin = pose.skin
    image = Image.new("RGB", (size, size), pose.background)
    draw = ImageDraw.Draw(image)

    cx, cy = size / 2.0, size * 0.62
    rx, ry = pose.palm_rx, pose.palm_ry
    for finger in pose.fingers:
        angle, length = finger.angle, finger.length
        start = (cx + 0.8 * rx * math.sin(angle), cy - 0.8 * ry * math.cos(angle))
        knuckle = (start[0] + 0.5 * length * math.sin(angle), start[1] - 0.5 * length * math.cos(angle))
        tip = (knuckle[0] + 0.5 * length * math.sin(finger.tip_angle),
               knuckle[1] - 0.5 * length * math.cos(finger.tip_angle))
        _capsule(draw, start, knuckle, finger.width, skin)
        _capsule(draw, knuckle, tip, finger.width * 0.9, skin)

    draw.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], fill=skin)
    crease = tuple(max(0, c - 40) for c in skin)
    for k in range(2):
        y = cy - ry * (0.1 + 0.3 * k)
        draw.line([(cx - 0.6 * rx, y), (cx + 0.5 * rx, y + 0.1 * ry)], fill=crease, width=max(1, size // 64))

    pixels = np.asarray(image, dtype=np.float64)
    shading = 1.0 - 0.15 * np.linspace(0.0, 1.0, size)[:, None, None]
    pixels = pixels * shading + rng.normal(0.0, spec.texture_noise * 255.0, size=pixels.shape)
    return np.clip(np.rint(pixels), 0, 255).astype(np.uint8)


def _hand_rng(spec: SyntheticHandSpec, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, SPLIT_IDS[split], index])


def render_hands(spec: SyntheticHandSpec, n: int, split: str = "train") -> np.ndarray:
    """n hand images [n, S, S, 3] uint8; image i depends only on (seed, split, i)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return np.stack([render_hand(spec, _hand_rng(spec, split, i)) for i in range(n)])


def hand_poses(spec: SyntheticHandSpec, n: int, split: str = "train") -> List[HandPose]:
    """The poses `render_hands` draws for the same arguments."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return [sample_hand_pose(spec, _hand_rng(spec, split, i)) for i in range(n)]


def make_synthetic_hands(spec: SyntheticHandSpec, n: int, directory: Path, split: str = "train") -> Path:
    """Render n hands and write them as a `hands` container."""
    images = render_hands(spec, n, split)
    logger.info("rendered %d %s hands at %dpx", n, split, spec.image_size)
    return write_container(
        directory, "hands", spec.model_dump(mode="json"), spec.seed, {"images": images},
    )


def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    """uint8 [N, H, W, 3] -> float32 [N, 3, H, W] in [-1, 1]."""
    x = torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).float()
    return x / 127.5 - 1.0


def tensor_to_images(x: torch.Tensor) -> np.ndarray:
    """float [N, 3, H, W] in [-1, 1] -> uint8 [N, H, W, 3]."""
    scaled = ((x.detach().clamp(-1.0, 1.0) + 1.0) * 127.5).round()
    return scaled.permute(0, 2, 3, 1).to(torch.uint8).cpu().numpy()


def load_hand_images(directory: Path) -> torch.Tensor:
    _, arrays = read_container(directory, "hands")
    return images_to_tensor(arrays["images"])


# --------------------------------------------------------------------------
# Clips
# --------------------------------------------------------------------------

@dataclass
class SyntheticClip:
    """
    One scripted clip.

    Attributes:
        frames: [F, 3, H, W] float32 in [-1, 1].
        skeletons: One full canonical skeleton per frame.
        audio: [1, F_win, T, D] audio features.
        rhythm_hz, rhythm_amplitude: Audio rhythm parameters.
        head_track: [F, 2] scripted head centre.
        hand_track: [F, 2, 2] scripted (left, right) hand centres.
    """
    frames: torch.Tensor
    skeletons: List[Skeleton2D]
    audio: torch.Tensor
    rhythm_hz: float
    rhythm_amplitude: float
    head_track: np.ndarray
    hand_track: np.ndarray

    def keypoints(self) -> np.ndarray:
        return np.stack([s.to_array(CANONICAL_JOINTS) for s in self.skeletons])


@dataclass(frozen=True)
class _BodyLayout:
    scale_x: float
    scale_y: float
    offset: Tuple[float, float]
    frame_size: int

    def place(self, x: float, y: float) -> Tuple[float, float]:
        """Map a point from the 64 px design grid into this clip's frame."""
        unit = self.frame_size / 64.0
        cx, cy = 32.0, 42.0
        return (
            (cx + self.scale_x * (x - cx)) * unit + self.offset[0],
            (cy + self.scale_y * (y - cy)) * unit + self.offset[1],
        )


def _hand_keypoints(side: str, centre: np.ndarray, unit: float) -> Dict[str, np.ndarray]:
    points = {hand_joint(side, 0): centre + np.array([0.0, -2.0]) * unit}
    for finger, chain in enumerate(FINGER_CHAINS):
        angle = math.radians(-60.0 + 30.0 * finger)
        direction = np.array([math.sin(angle), math.cos(angle)])
        for k, idx in enumerate(chain, start=1):
            points[hand_joint(side, idx)] = points[hand_joint(side, 0)] + 1.2 * k * unit * direction
    return points


def _clip_skeleton(
    layout: _BodyLayout,
    head_centre: np.ndarray,
    hands: Dict[str, np.ndarray],
) -> Skeleton2D:
    unit = layout.frame_size / 64.0
    pos: Dict[str, np.ndarray] = {}
    design = {
        "neck": (32.0, 28.0),
        "left_shoulder": (41.0, 31.0), "right_shoulder": (23.0, 31.0),
        "left_hip": (38.0, 58.0), "right_hip": (26.0, 58.0),
    }
    for name, (x, y) in design.items():
        pos[name] = np.array(layout.place(x, y))
    for side, outward in (("left", 1.0), ("right", -1.0)):
        centre = hands[side]
        wrist = centre + np.array([0.0, -4.0]) * unit
        shoulder = pos[f"{side}_shoulder"]
        pos[f"{side}_wrist"] = wrist
        pos[f"{side}_elbow"] = (shoulder + wrist) / 2.0 + np.array([3.0 * outward, 0.0]) * unit
        pos.update(_hand_keypoints(side, centre, unit))
    pos["nose"] = head_centre + np.array([0.0, 1.5]) * unit
    for i in range(FACE_KEYPOINTS):
        theta = 2.0 * math.pi * i / FACE_KEYPOINTS
        pos[face_joint(i)] = head_centre + 5.0 * unit * np.array([math.cos(theta), math.sin(theta)])
    return Skeleton2D({name: Joint(float(p[0]), float(p[1]), 1.0) for name, p in pos.items()})


def render_frame(skel: Skeleton2D, head_centre: np.ndarray, hand_centres: Dict[str, np.ndarray],
                 frame_size: int, noise: float, rng: np.random.Generator) -> np.ndarray:
    """Draw one clip frame, uint8 [H, W, 3]."""
    unit = frame_size / 64.0
    image = Image.new("RGB", (frame_size, frame_size), BACKGROUND_RGB)
    draw = ImageDraw.Draw(image)
    torso = [tuple(skel.xy(n)) for n in ("left_shoulder", "left_hip", "right_hip", "right_shoulder")]
    draw.polygon(torso, fill=TORSO_RGB)
    width = max(1, int(round(3 * unit)))
    for side in ("left", "right"):
        arm = [tuple(skel.xy(f"{side}_{j}")) for j in ("shoulder", "elbow", "wrist")]
        draw.line(arm, fill=LIMB_RGB, width=width)
    draw.line([tuple(skel.xy("neck")), tuple(head_centre)], fill=LIMB_RGB, width=width)
    r = HEAD_RADIUS * unit
    draw.ellipse([head_centre[0] - r, head_centre[1] - r, head_centre[0] + r, head_centre[1] + r], fill=HEAD_RGB)
    r = HAND_RADIUS * unit
    for centre in hand_centres.values():
        draw.ellipse([centre[0] - r, centre[1] - r, centre[0] + r, centre[1] + r], fill=HAND_RGB)
    pixels = np.asarray(image, dtype=np.float64)
    pixels = pixels + rng.normal(0.0, noise * 255.0, size=pixels.shape)
    return np.clip(np.rint(pixels), 0, 255).astype(np.uint8)


def make_synthetic_clip(
    seed: int,
    frames: int = 24,
    spec: Optional[SyntheticClipSpec] = None,
    audio_cfg: Optional[AudioConfig] = None,
    rhythm_hz: Optional[float] = None,
    rhythm_amplitude: Optional[float] = None,
) -> SyntheticClip:
    """
    Script one clip: head nods with the audio rhythm envelope, hands trace ellipses.

    The head offset at frame f is proportional to the envelope sampled at
    time f / fps, so a zero rhythm amplitude gives a static head.
    """
    if frames < 1:
        raise ValueError("frames must be >= 1")
    spec = spec or SyntheticClipSpec()
    audio_cfg = audio_cfg or AudioConfig()
    rng = np.random.default_rng(seed)
    hz = float(rng.uniform(*spec.rhythm_hz_range)) if rhythm_hz is None else float(rhythm_hz)
    drawn_amp = float(rng.uniform(*spec.rhythm_amplitude_range))
    amplitude = drawn_amp if rhythm_amplitude is None else float(rhythm_amplitude)
    layout = _BodyLayout(
        scale_x=float(rng.uniform(0.85, 1.15)),
        scale_y=float(rng.uniform(0.85, 1.15)),
        offset=(float(rng.uniform(-2.0, 2.0)), float(rng.uniform(-2.0, 2.0))),
        frame_size=spec.frame_size,
    )
    hand_hz = float(rng.uniform(0.5, 1.5))
    hand_phase = rng.uniform(0.0, 2.0 * math.pi, size=2)
    audio_seed = int(rng.integers(0, 2**31 - 1))
    noise_seed = int(rng.integers(0, 2**31 - 1))
    noise_rng = np.random.default_rng(noise_seed)
    unit = spec.frame_size / 64.0

    times = np.arange(frames) / spec.fps
    envelope = rhythm_envelope(hz, frames, token_rate_hz=spec.fps, amplitude=amplitude)
    head_base = np.array(layout.place(32.0, 17.0))
    head_track = np.zeros((frames, 2))
    hand_track = np.zeros((frames, 2, 2))
    skeletons, images = [], []
    for f in range(frames):
        dy = spec.head_motion_px * unit * envelope[f]
        dx = 0.5 * spec.head_motion_px * unit * amplitude * math.sin(2.0 * math.pi * hz * times[f])
        head = head_base + np.array([dx, dy])
        hands = {}
        for k, (side, x0) in enumerate((("left", 44.0), ("right", 20.0))):
            phase = 2.0 * math.pi * hand_hz * times[f] + hand_phase[k]
            base = np.array(layout.place(x0, 46.0))
            hands[side] = base + spec.hand_motion_px * unit * np.array([math.sin(phase), 0.6 * math.cos(phase)])
        skel = _clip_skeleton(layout, head, hands)
        images.append(render_frame(skel, head, hands, spec.frame_size, spec.texture_noise, noise_rng))
        skeletons.append(skel)
        head_track[f] = head
        hand_track[f, 0], hand_track[f, 1] = hands["left"], hands["right"]

    audio = synth_audio_features(
        audio_seed, hz, audio_cfg.tokens, window=audio_cfg.window, dim=audio_cfg.dim,
        amplitude=amplitude, noise=spec.audio_noise, token_rate_hz=audio_cfg.token_rate_hz,
    )
    return SyntheticClip(
        frames=images_to_tensor(np.stack(images)),
        skeletons=skeletons,
        audio=audio,
        rhythm_hz=hz,
        rhythm_amplitude=amplitude,
        head_track=head_track,
        hand_track=hand_track,
    )


def make_synthetic_clips(
    spec: SyntheticClipSpec,
    audio_cfg: AudioConfig,
    n: int,
    directory: Path,
    split: str = "train",
    autoencoder: Optional["ToyAutoencoder"] = None,
) -> Path:
    """
    Render n clips and write a `clips` container holding frames, latents,
    keypoints, audio features and rhythm parameters.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    autoencoder = autoencoder or ToyAutoencoder(frame_size=spec.frame_size)
    split_id = SPLIT_IDS[split]
    frames, latents, keypoints, audio, hz, amp, heads = [], [], [], [], [], [], []
    for i in range(n):
        seed = int(np.random.default_rng([spec.seed, split_id, i]).integers(0, 2**31 - 1))
        clip = make_synthetic_clip(seed, spec.frames, spec, audio_cfg)
        frames.append(tensor_to_images(clip.frames))
        latents.append(autoencoder.encode(clip.frames).numpy())
        keypoints.append(clip.keypoints().astype(np.float32))
        audio.append(clip.audio[0].numpy())
        hz.append(clip.rhythm_hz)
        amp.append(clip.rhythm_amplitude)
        heads.append(clip.head_track)
    logger.info("rendered %d %s clips of %d frames", n, split, spec.frames)
    return write_container(
        directory,
        "clips",
        {"clips": spec.model_dump(mode="json"), "audio": audio_cfg.model_dump(mode="json")},
        spec.seed,
        {
            "frames": np.stack(frames),
            "latents": np.stack(latents).astype(np.float32),
            "keypoints": np.stack(keypoints),
            "audio": np.stack(audio).astype(np.float32),
            "rhythm_hz": np.asarray(hz, dtype=np.float64),
            "rhythm_amplitude": np.asarray(amp, dtype=np.float64),
            "head_track": np.stack(heads).astype(np.float64),
        },
    )


@dataclass
class ClipSet:
    """A loaded `clips` container."""
    frames: torch.Tensor
    latents: torch.Tensor
    keypoints: np.ndarray
    audio: torch.Tensor
    rhythm_hz: np.ndarray
    rhythm_amplitude: np.ndarray
    head_track: np.ndarray

    def __len__(self) -> int:
        return int(self.latents.shape[0])

    def skeletons(self, index: int) -> List[Skeleton2D]:
        return [Skeleton2D.from_array(kp, CANONICAL_JOINTS) for kp in self.keypoints[index]]


def load_clips(directory: Path) -> ClipSet:
    _, arrays = read_container(directory, "clips")
    frames = arrays["frames"]
    n, f = frames.shape[:2]
    return ClipSet(
        frames=images_to_tensor(frames.reshape(n * f, *frames.shape[2:])).reshape(n, f, 3, *frames.shape[2:4]),
        latents=torch.from_numpy(arrays["latents"]),
        keypoints=arrays["keypoints"],
        audio=torch.from_numpy(arrays["audio"]),
        rhythm_hz=arrays["rhythm_hz"],
        rhythm_amplitude=arrays["rhythm_amplitude"],
        head_track=arrays["head_track"],
    )


# --------------------------------------------------------------------------
# Toy autoencoder
# --------------------------------------------------------------------------

class ToyAutoencoder:
    """
    Fixed frame <-> latent map.

    Encode: 4x average pooling, then a fixed projection of the 3 colour
    channels onto `latent_channels` orthonormal directions. Decode: the
    transpose (pseudo-inverse) projection and nearest upsampling.
    """

    def __init__(self, frame_size: int = 64, latent_size: int = 16, latent_channels: int = 4, seed: int = 0):
        if latent_channels < 3:
            raise ConfigError("the toy autoencoder needs at least 3 latent channels")
        if frame_size % latent_size != 0:
            raise ConfigError("latent_size must divide frame_size")
        self.frame_size = frame_size
        self.latent_size = latent_size
        self.factor = frame_size // latent_size
        gen = torch.Generator().manual_seed(seed)
        q, _ = torch.linalg.qr(torch.randn(latent_channels, 3, generator=gen, dtype=torch.float64))
        self.projection = q.float()

    def encode(self, frames: torch.Tensor) -> torch.Tensor:
        """[..., 3, H, W] -> [..., C, h, w]."""
        if frames.shape[-3:] != (3, self.frame_size, self.frame_size):
            raise ShapeError(f"expected [..., 3, {self.frame_size}, {self.frame_size}] frames")
        lead = frames.shape[:-3]
        pooled = F.avg_pool2d(frames.reshape(-1, 3, self.frame_size, self.frame_size).float(), self.factor)
        z = torch.einsum("ck,nkhw->nchw", self.projection, pooled)
        return z.reshape(*lead, *z.shape[1:])

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        """[..., C, h, w] -> [..., 3, H, W]."""
        c = self.projection.shape[0]
        if latents.shape[-3:] != (c, self.latent_size, self.latent_size):
            raise ShapeError(f"expected [..., {c}, {self.latent_size}, {self.latent_size}] latents")
        lead = latents.shape[:-3]
        flat = latents.reshape(-1, c, self.latent_size, self.latent_size).float()
        rgb = torch.einsum("ck,nchw->nkhw", self.projection, flat)
        up = F.interpolate(rgb, scale_factor=self.factor, mode="nearest")
        return up.reshape(*lead, *up.shape[1:])


# --------------------------------------------------------------------------
# Pose maps, hand crops, tracking
# --------------------------------------------------------------------------

POSE_BODY_RGB = (255, 255, 255)
POSE_HAND_RGB = {"left": (255, 128, 0), "right": (0, 128, 255)}
_TORSO_LINES = (
    ("neck", "left_shoulder"), ("neck", "right_shoulder"),
    ("left_shoulder", "left_hip"), ("right_shoulder", "right_hip"), ("left_hip", "right_hip"),
)


def render_pose_map(skel: Skeleton2D, frame_size: int = 64, threshold: float = 0.3) -> torch.Tensor:
    """
    Draw torso, arms and hands of a skeleton as a [3, H, W] image in [-1, 1].

    Head and face keypoints are left out, so head motion has to come from audio.
    """
    image = Image.new("RGB", (frame_size, frame_size), (0, 0, 0))
    draw = ImageDraw.Draw(image)
    skip = set(FACE_JOINTS) | {"nose"}
    for parent, child in _TORSO_LINES + CANONICAL_SEGMENTS:
        if parent in skip or child in skip:
            continue
        if not (skel.confident(parent, threshold) and skel.confident(child, threshold)):
            continue
        colour = POSE_BODY_RGB
        for side, rgb in POSE_HAND_RGB.items():
            if child.startswith(f"{side}_hand"):
                colour = rgb
        draw.line([tuple(skel.xy(parent)), tuple(skel.xy(child))], fill=colour, width=1)
    return images_to_tensor(np.asarray(image)[None])[0]


def render_pose_maps(skeletons: Sequence[Skeleton2D], frame_size: int = 64) -> torch.Tensor:
    return torch.stack([render_pose_map(s, frame_size) for s in skeletons])


def crop_hands(frame: torch.Tensor, skel: Skeleton2D, out_size: int, crop_px: int = 16) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Square crops around each hand, resized to the codebook input size.

    Regions outside the frame are filled with -1.

    Returns:
        Tuple of (left, right) crops, each [3, out_size, out_size] in [-1, 1].
    """
    half = crop_px // 2
    padded = F.pad(frame, (half, half, half, half), value=-1.0)
    crops = []
    for side in ("left", "right"):
        names = [hand_joint(side, i) for i in range(HAND_KEYPOINTS) if hand_joint(side, i) in skel]
        if names:
            cx, cy = skel.points(names).mean(axis=0)
        else:
            cx, cy = skel.xy(f"{side}_wrist")
        # Padding shifts coordinates by `half`, so the window starting at round(c) is centred on c.
        x0 = int(round(cx))
        y0 = int(round(cy))
        x0 = min(max(x0, 0), padded.shape[-1] - crop_px)
        y0 = min(max(y0, 0), padded.shape[-2] - crop_px)
        patch = padded[:, y0:y0 + crop_px, x0:x0 + crop_px]
        resized = F.interpolate(patch[None], size=(out_size, out_size), mode="bilinear", align_corners=False)[0]
        crops.append(resized.clamp(-1.0, 1.0))
    return crops[0], crops[1]


@dataclass
class TrackedMotion:
    """Colour-signature centroids per frame, [F, 2] each (x, y)."""
    head: np.ndarray
    left_hand: np.ndarray
    right_hand: np.ndarray


def _signature_centroid(weights: np.ndarray) -> Optional[np.ndarray]:
    total = weights.sum()
    if total <= 0.0:
        return None
    ys, xs = np.mgrid[0:weights.shape[0], 0:weights.shape[1]]
    return np.array([(xs * weights).sum() / total, (ys * weights).sum() / total])


def _fill_missing(track: List[Optional[np.ndarray]], fallback: np.ndarray) -> np.ndarray:
    out, last = [], None
    first = next((p for p in track if p is not None), fallback)
    for p in track:
        last = p if p is not None else (last if last is not None else first)
        out.append(last)
    return np.stack(out)


def track_colour_centroids(frames: torch.Tensor, margin: float = 0.3) -> TrackedMotion:
    """
    Locate the red head disc and the green hand discs in [F, 3, H, W] frames.

    A pixel's weight is how far its signature channel exceeds the other two
    beyond `margin`. Hands are split by image half (larger x is the left hand).
    Frames where a part is not found reuse the previous centroid.
    """
    x = frames.detach().float().cpu().numpy()
    _, _, _, width = x.shape
    heads, lefts, rights = [], [], []
    for frame in x:
        r, g, b = frame
        head_w = np.clip(r - np.maximum(g, b) - margin, 0.0, None)
        hand_w = np.clip(g - np.maximum(r, b) - margin, 0.0, None)
        heads.append(_signature_centroid(head_w))
        right_w, left_w = hand_w.copy(), hand_w.copy()
        right_w[:, width // 2:] = 0.0
        left_w[:, :width // 2] = 0.0
        lefts.append(_signature_centroid(left_w))
        rights.append(_signature_centroid(right_w))
    centre = np.array([width / 2.0, x.shape[2] / 2.0])
    return TrackedMotion(
        head=_fill_missing(heads, centre),
        left_hand=_fill_missing(lefts, centre),
        right_hand=_fill_missing(rights, centre),
    )
