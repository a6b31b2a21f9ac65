"""
Dual-stream audio conditioning: window pooling, the rhythm projection,
region masks over latent tokens and the masked cross-attention primitive
shared by the head, lip and hand-codebook streams.

Masks gate the attention residual: rows where the mask is 0 come back
bit-identical to the input hidden state.
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
from einops import rearrange

from config_manager import AudioConfig
from enums import Region
from errors import ShapeError
from pose_calibration import FACE_JOINTS, HAND_JOINTS, Skeleton2D

logger = logging.getLogger(__name__)


@dataclass
class RegionMask:
    """
    Binary mask over the latent tokens of one attention site.

    Attributes:
        data (torch.Tensor): [batch, N_latent, 1] with entries in {0, 1}.
        region (Region): Which body region the mask selects.
    """
    data: torch.Tensor
    region: Region = Region.HEAD

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[-1] != 1:
            raise ShapeError(f"region mask must be [B, N, 1], got {tuple(self.data.shape)}")
        if not bool(((self.data == 0) | (self.data == 1)).all()):
            raise ValueError("region mask entries must be 0 or 1")


MaskLike = Union[RegionMask, torch.Tensor, None]


def _mask_tensor(mask: MaskLike) -> Optional[torch.Tensor]:
    if mask is None:
        return None
    return mask.data if isinstance(mask, RegionMask) else mask


def validate_audio_features(w: torch.Tensor, cfg: AudioConfig) -> None:
    """Check an audio feature tensor against the configured [B, F, T, D] dims."""
    expected = (cfg.window, cfg.tokens, cfg.dim)
    if w.ndim != 4 or tuple(w.shape[1:]) != expected:
        raise ShapeError(f"audio features must be [B, {expected}], got {tuple(w.shape)}")
    if not torch.isfinite(w).all():
        raise ValueError("audio features contain non-finite values")


def pool_windows(w: torch.Tensor) -> torch.Tensor:
    """Average over the window axis: [B, F, T, D] -> [B, T, D]."""
    if w.ndim != 4:
        raise ShapeError(f"expected [B, F, T, D] audio features, got {tuple(w.shape)}")
    return w.mean(dim=1)


class RhythmProjector(nn.Module):
    """
    Compresses pooled audio features to the rhythm embedding.

    Two-layer MLP by default; `linear=True` gives a single linear map.
    """

    def __init__(self, in_dim: int, out_dim: int, hidden_dim: Optional[int] = None,
                 linear: bool = False, bias: bool = True):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        if linear:
            self.net = nn.Linear(in_dim, out_dim, bias=bias)
        else:
            hidden = hidden_dim or max(out_dim, (in_dim + out_dim) // 2)
            self.net = nn.Sequential(
                nn.Linear(in_dim, hidden, bias=bias),
                nn.SiLU(),
                nn.Linear(hidden, out_dim, bias=bias),
            )

    def forward(self, f_r: torch.Tensor) -> torch.Tensor:
        return self.net(f_r)


def project_rhythm(f_r: torch.Tensor, params: RhythmProjector) -> torch.Tensor:
    """
    Apply G_theta to pooled features [B, T, D_aud] -> [B, T, D_proj].

    Raises:
        ShapeError: If the feature dim does not match the projector.
    """
    if f_r.shape[-1] != params.in_dim:
        raise ShapeError(f"rhythm projector expects dim {params.in_dim}, got {f_r.shape[-1]}")
    return params(f_r)


class MaskedCrossAttention(nn.Module):
    """
    Residual cross-attention whose update is applied only where the mask is 1.

    output = hidden + mask * Attn(W_q hidden, W_k context, W_v context)
    """

    def __init__(self, query_dim: int, context_dim: int, heads: int = 1,
                 head_dim: Optional[int] = None, pre_norm: bool = False):
        super().__init__()
        head_dim = head_dim or query_dim // heads
        inner = heads * head_dim
        self.heads = heads
        self.head_dim = head_dim
        self.query_dim = query_dim
        self.context_dim = context_dim
        self.to_q = nn.Linear(query_dim, inner, bias=False)
        self.to_k = nn.Linear(context_dim, inner, bias=False)
        self.to_v = nn.Linear(context_dim, inner, bias=False)
        self.to_out = nn.Linear(inner, query_dim)
        # Queries only; the residual is still added to the raw hidden state.
        self.norm = nn.LayerNorm(query_dim) if pre_norm else nn.Identity()

    def attention_weights(self, hidden: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        """Softmax weights [B, heads, N_latent, N_ctx]."""
        q = rearrange(self.to_q(self.norm(hidden)), "b n (h d) -> b h n d", h=self.heads)
        k = rearrange(self.to_k(context), "b m (h d) -> b h m d", h=self.heads)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        return torch.softmax(scores, dim=-1)

    def attend(self, hidden: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        weights = self.attention_weights(hidden, context)
        v = rearrange(self.to_v(context), "b m (h d) -> b h m d", h=self.heads)
        out = rearrange(weights @ v, "b h n d -> b n (h d)")
        return self.to_out(out)

    def forward(self, hidden: torch.Tensor, context: torch.Tensor, mask: MaskLike = None) -> torch.Tensor:
        if hidden.ndim != 3 or context.ndim != 3:
            raise ShapeError("hidden must be [B, N, C] and context [B, M, D]")
        if context.shape[1] == 0:
            raise ShapeError("cross-attention context has zero length")
        if context.shape[0] != hidden.shape[0]:
            raise ShapeError(
                f"batch mismatch: hidden {hidden.shape[0]} vs context {context.shape[0]}"
            )
        if hidden.shape[-1] != self.query_dim or context.shape[-1] != self.context_dim:
            raise ShapeError(
                f"attention expects dims ({self.query_dim}, {self.context_dim}), "
                f"got ({hidden.shape[-1]}, {context.shape[-1]})"
            )
        m = _mask_tensor(mask)
        if m is not None and (m.shape[0] != hidden.shape[0] or m.shape[1] != hidden.shape[1]):
            raise ShapeError(
                f"mask {tuple(m.shape)} does not match hidden tokens {tuple(hidden.shape[:2])}"
            )
        update = self.attend(hidden, context)
        if m is None:
            return hidden + update
        return torch.where(m.to(torch.bool), hidden + update, hidden)


def masked_cross_attention(
    hidden: torch.Tensor,
    context: torch.Tensor,
    mask: MaskLike,
    params: MaskedCrossAttention,
) -> torch.Tensor:
    """Functional form of `MaskedCrossAttention.forward`."""
    return params(hidden, context, mask)


def region_mask_from_points(
    points: np.ndarray,
    latent_hw: Tuple[int, int],
    frame_hw: Tuple[int, int],
    dilation: float,
) -> np.ndarray:
    """
    Rasterize the dilated bounding box of `points` ([K, 2] as x, y) to the latent grid.

    A latent cell is set when its pixel rectangle intersects the box.

    Returns:
        np.ndarray: Float array [h * w] of zeros and ones (row-major).
    """
    h, w = latent_hw
    big_h, big_w = frame_hw
    if big_h % h != 0 or big_w % w != 0:
        raise ShapeError(f"latent size {latent_hw} must divide frame size {frame_hw}")
    mask = np.zeros((h, w), dtype=np.float32)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if points.shape[0] == 0:
        return mask.reshape(-1)

    x0, y0 = points.min(axis=0)
    x1, y1 = points.max(axis=0)
    pad = dilation * math.hypot(x1 - x0, y1 - y0)
    x0, x1 = x0 - pad, x1 + pad
    y0, y1 = y0 - pad, y1 + pad
    # Keep at least the cell containing the clamped box inside the frame.
    x0 = min(max(x0, 0.0), np.nextafter(big_w, 0))
    x1 = min(max(x1, 0.0), np.nextafter(big_w, 0))
    y0 = min(max(y0, 0.0), np.nextafter(big_h, 0))
    y1 = min(max(y1, 0.0), np.nextafter(big_h, 0))

    cell_w = big_w / w
    cell_h = big_h / h
    cols = np.arange(w)
    rows = np.arange(h)
    col_hit = (x0 < (cols + 1) * cell_w) & (x1 >= cols * cell_w)
    row_hit = (y0 < (rows + 1) * cell_h) & (y1 >= rows * cell_h)
    mask[np.ix_(row_hit, col_hit)] = 1.0
    return mask.reshape(-1)


def _mask_from_joints(
    skel: Skeleton2D,
    names: Sequence[str],
    latent_hw: Tuple[int, int],
    frame_hw: Tuple[int, int],
    dilation: float,
    region: Region,
) -> Tuple[RegionMask, bool]:
    points = skel.points(n for n in names if skel.joints.get(n) is not None and skel.joints[n].confidence > 0)
    warning = points.shape[0] == 0
    if warning:
        logger.warning("no %s keypoints present; returning an empty mask", region.value)
    flat = region_mask_from_points(points, latent_hw, frame_hw, dilation)
    data = torch.from_numpy(flat).reshape(1, -1, 1)
    return RegionMask(data=data, region=region), warning


# The box covers the face points only; the neck stays outside it (unlike the
# joint set metrics.HEAD_JOINTS scores for HMV).
HEAD_MASK_JOINTS = ("nose",) + FACE_JOINTS


def head_mask_from_keypoints(
    skel: Skeleton2D,
    latent_hw: Tuple[int, int],
    frame_hw: Tuple[int, int],
    dilation: float = 0.25,
) -> Tuple[RegionMask, bool]:
    """
    Head mask from the dilated face/nose bounding box.

    Returns:
        Tuple of (mask [1, h*w, 1], warning flag set when no face keypoints exist).
    """
    return _mask_from_joints(skel, HEAD_MASK_JOINTS, latent_hw, frame_hw, dilation, Region.HEAD)


def hand_mask_from_keypoints(
    skel: Skeleton2D,
    latent_hw: Tuple[int, int],
    frame_hw: Tuple[int, int],
    dilation: float = 0.25,
) -> Tuple[RegionMask, bool]:
    """Hand mask as the union of the per-hand dilated boxes."""
    masks = []
    warning = True
    for side in ("left", "right"):
        names = [n for n in HAND_JOINTS if n.startswith(side)] + [f"{side}_wrist"]
        mask, missing = _mask_from_joints(skel, names, latent_hw, frame_hw, dilation, Region.HAND)
        masks.append(mask.data)
        warning = warning and missing
    union = torch.clamp(masks[0] + masks[1], max=1.0)
    return RegionMask(data=union, region=Region.HAND), warning


def rhythm_envelope(rhythm_hz: float, length_tokens: int, token_rate_hz: float = 50.0,
                    amplitude: float = 1.0, phase: float = 0.0) -> np.ndarray:
    """amplitude * cos(2 pi f t / rate + phase) sampled at the token rate."""
    t = np.arange(length_tokens, dtype=np.float64)
    return amplitude * np.cos(2.0 * math.pi * rhythm_hz * t / token_rate_hz + phase)


def synth_audio_features(
    seed: int,
    rhythm_hz: float,
    length_tokens: int,
    window: int = 24,
    dim: int = 384,
    amplitude: float = 1.0,
    noise: float = 0.1,
    token_rate_hz: float = 50.0,
) -> torch.Tensor:
    """
    Seeded stand-in for speech-encoder features.

    Every window carries the same rhythm envelope times a fixed per-seed
    feature pattern, plus independent noise; pooling over windows recovers
    the envelope.

    Returns:
        torch.Tensor: [1, window, length_tokens, dim] float32.
    """
    if length_tokens < 1:
        raise ValueError("length_tokens must be >= 1")
    rng = np.random.default_rng(seed)
    pattern = rng.standard_normal(dim)
    pattern /= np.linalg.norm(pattern) / math.sqrt(dim)
    envelope = rhythm_envelope(rhythm_hz, length_tokens, token_rate_hz, amplitude)
    base = envelope[:, None] * pattern[None, :]
    jitter = noise * rng.standard_normal((window, length_tokens, dim))
    features = base[None, :, :] + jitter
    return torch.from_numpy(features.astype(np.float32)).unsqueeze(0)


def frame_aligned_streams(
    w: torch.Tensor,
    frames: int,
    fps: float,
    token_rate_hz: float = 50.0,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Per-frame lip tokens and rhythm features for a clip.

    The token axis spans the clip timeline. For frame f both streams are
    rolled along tokens so the token at time f / fps sits at index T // 2;
    lip tokens come from window f (cycled when frames exceed windows),
    rhythm features from the window-pooled tensor.

    Args:
        w: [B, F_win, T, D] audio features.

    Returns:
        Tuple of (lip [B, frames, T, D], rhythm [B, frames, T, D]).
    """
    if w.ndim != 4:
        raise ShapeError(f"expected [B, F, T, D] audio features, got {tuple(w.shape)}")
    windows, tokens = w.shape[1], w.shape[2]
    pooled = pool_windows(w)
    lip, rhythm = [], []
    for f in range(frames):
        centre = int(round(f * token_rate_hz / fps)) % tokens
        shift = tokens // 2 - centre
        lip.append(torch.roll(w[:, f % windows], shifts=shift, dims=1))
        rhythm.append(torch.roll(pooled, shifts=shift, dims=1))
    return torch.stack(lip, dim=1), torch.stack(rhythm, dim=1)
