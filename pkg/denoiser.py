"""
Toy conditional U-Net noise predictor.

Two resolution levels with an attention stack at three sites
(`down_{L}`, `mid_{L/2}`, `up_{L}`). Each stack runs, in order:
self-attention, reference cross-attention, lip cross-attention,
head-masked rhythm attention, hand-masked Codebook Attention and a
feed-forward layer. Pose features from the hand encoder are concatenated
to the noisy latent along channels. The stage-2 topology adds temporal
attention over the frame axis after every site.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from audio_streams import MaskLike, MaskedCrossAttention, RegionMask, RhythmProjector, project_rhythm
from config_manager import AudioConfig, DenoiserConfig, GuidanceConfig, StageTrainingConfig
from diffusion_core import NoiseSchedule, cfg_combine, forward_diffuse, noise_loss, sample_timesteps
from enums import TrainingStage
from errors import ConfigError, NonFiniteLossError, ShapeError
from hand_codebook import HandCodebookModel
from pose_calibration import Skeleton2D

logger = logging.getLogger(__name__)

Timestep = Union[int, torch.Tensor]


@dataclass
class ConditioningBundle:
    """
    Every condition the denoiser consumes.

    Per-clip tensors carry a leading batch axis; per-frame tensors add a
    frame axis after it. Pose and reference inputs may be given raw (pose
    maps, reference latent) or pre-encoded (pose features, per-site
    reference tokens). `rhythm` holds window-pooled audio features; the
    denoiser owns the projection to the rhythm embedding.

    Attributes:
        pose_maps: [B, (F,) 3, H, W] rendered calibrated skeletons.
        pose_features: [B, (F,) C_pose, h, w] hand-encoder output.
        reference_image: [B, C_lat, h, w] latent of the reference frame.
        reference_features: site name -> [B, N_site, C_site] tokens.
        hand_tokens: [B, 2 * Q_h * Q_w, D_code] quantized hand tokens.
        lip: [B, (F,) T, D_aud] lip-stream tokens.
        rhythm: [B, (F,) T, D_aud] pooled audio features.
        head_mask: site name -> [B, (F,) N_site, 1] head mask.
        hand_mask: site name -> [B, (F,) N_site, 1] hand mask.
        drop_audio: Replace lip and rhythm with learned null embeddings.
        drop_image: Replace reference and hand tokens with learned null embeddings.
    """
    pose_maps: Optional[torch.Tensor] = None
    pose_features: Optional[torch.Tensor] = None
    reference_image: Optional[torch.Tensor] = None
    reference_features: Optional[Dict[str, torch.Tensor]] = None
    hand_tokens: Optional[torch.Tensor] = None
    lip: Optional[torch.Tensor] = None
    rhythm: Optional[torch.Tensor] = None
    head_mask: Optional[Dict[str, MaskLike]] = None
    hand_mask: Optional[Dict[str, MaskLike]] = None
    drop_audio: bool = False
    drop_image: bool = False

    def with_drops(self, drop_audio: bool, drop_image: bool) -> "ConditioningBundle":
        return replace(self, drop_audio=drop_audio, drop_image=drop_image)


def sinusoidal_embedding(positions: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """[N] positions -> [N, dim] sin/cos features."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float32, device=positions.device) / max(half, 1)
    )
    args = positions.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _tokens(x: torch.Tensor) -> torch.Tensor:
    return rearrange(x, "n c h w -> n (h w) c")


def _per_frame(x: torch.Tensor, batch: int, frames: int, base_ndim: int, what: str) -> torch.Tensor:
    """Broadcast a per-clip or per-frame condition to the flattened [B*F, ...] layout."""
    if x.ndim == base_ndim + 1:
        if x.shape[1] != frames or x.shape[0] not in (1, batch):
            raise ShapeError(f"{what}: expected [B, {frames}, ...], got {tuple(x.shape)}")
        x = x.expand(batch, *x.shape[1:])
        return x.reshape(batch * frames, *x.shape[2:])
    if x.ndim == base_ndim:
        if x.shape[0] not in (1, batch):
            raise ShapeError(f"{what}: batch {x.shape[0]} does not match {batch}")
        return x.expand(batch, *x.shape[1:]).repeat_interleave(frames, dim=0)
    raise ShapeError(f"{what}: unexpected rank {x.ndim}")


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: Optional[int] = None):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, out_ch) if temb_dim else None
        self.norm2 = nn.GroupNorm(8, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: Optional[torch.Tensor] = None) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        if self.temb_proj is not None and temb is not None:
            h = h + self.temb_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class HandPoseEncoder(nn.Module):
    """
    Pose maps at frame resolution -> pose features at latent resolution.

    Three 3x3 convolutions (strides 1, 2, 2) and a zero-initialized 3x3
    output layer, so conditioning is a no-op at initialization. Output
    cell i sees input pixels [4i - 8, 4i + 8] along each axis.
    """

    def __init__(self, cfg: DenoiserConfig, hidden: int = 32, zero_init: bool = True):
        super().__init__()
        self.frame_size = cfg.frame_size
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=1, padding=1),
            nn.SiLU(),
            nn.Conv2d(16, hidden, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden, hidden, 3, stride=2, padding=1),
            nn.SiLU(),
        )
        self.out = nn.Conv2d(hidden, cfg.pose_channels, 3, stride=1, padding=1)
        if zero_init:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def forward(self, pose_maps: torch.Tensor) -> torch.Tensor:
        size = self.frame_size
        if pose_maps.ndim < 4 or tuple(pose_maps.shape[-3:]) != (3, size, size):
            raise ShapeError(f"pose maps must be [..., 3, {size}, {size}], got {tuple(pose_maps.shape)}")
        lead = pose_maps.shape[:-3]
        y = self.out(self.net(pose_maps.reshape(-1, 3, size, size)))
        return y.reshape(*lead, *y.shape[1:])


def hand_encoder(pose_maps: torch.Tensor, params: HandPoseEncoder) -> torch.Tensor:
    return params(pose_maps)


class ReferenceEncoder(nn.Module):
    """Small mirrored encoder giving one token array per attention site."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        w0, w1 = cfg.widths
        self.latent_channels = cfg.latent_channels
        self.latent_size = cfg.latent_size
        self.site_names = list(cfg.site_resolutions)
        self.stem = nn.Conv2d(cfg.latent_channels, w0, 3, padding=1)
        self.block_hi = ResBlock(w0, w0)
        self.down = nn.Conv2d(w0, w1, 3, stride=2, padding=1)
        self.block_lo = ResBlock(w1, w1)
        self.fuse = nn.Conv2d(w0 + w1, w0, 1)

    def forward(self, ref: torch.Tensor) -> Dict[str, torch.Tensor]:
        expected = (self.latent_channels, self.latent_size, self.latent_size)
        if ref.ndim != 4 or tuple(ref.shape[1:]) != expected:
            raise ShapeError(f"reference latent must be [B, {expected}], got {tuple(ref.shape)}")
        hi = self.block_hi(self.stem(ref))
        lo = self.block_lo(self.down(hi))
        up = self.fuse(torch.cat([F.interpolate(lo, scale_factor=2, mode="nearest"), hi], dim=1))
        down_name, mid_name, up_name = self.site_names
        return {down_name: _tokens(hi), mid_name: _tokens(lo), up_name: _tokens(up)}


def reference_features(ref_image: torch.Tensor, params: ReferenceEncoder) -> Dict[str, torch.Tensor]:
    return params(ref_image)


class TemporalAttention(nn.Module):
    """
    Self-attention along the frame axis, independently per spatial location.

    Input and output are [B, F, C, h, w]; F must equal `num_frames`.
    """

    def __init__(self, channels: int, num_frames: int, heads: int = 1,
                 position_encoding: bool = True, zero_out: bool = False):
        super().__init__()
        self.channels = channels
        self.num_frames = num_frames
        self.heads = heads
        self.head_dim = channels // heads
        self.norm = nn.LayerNorm(channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(channels, channels, bias=False)
        self.to_v = nn.Linear(channels, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)
        if zero_out:
            nn.init.zeros_(self.to_out.weight)
            nn.init.zeros_(self.to_out.bias)
        if position_encoding:
            pe = sinusoidal_embedding(torch.arange(num_frames), channels)
            self.register_buffer("position", pe)
        else:
            self.position = None

    def forward(self, latents: torch.Tensor) -> torch.Tensor:
        if latents.ndim != 5:
            raise ShapeError(f"temporal attention expects [B, F, C, h, w], got {tuple(latents.shape)}")
        b, frames, c, h, w = latents.shape
        if frames != self.num_frames:
            raise ShapeError(f"temporal attention built for {self.num_frames} frames, got {frames}")
        if c != self.channels:
            raise ShapeError(f"temporal attention built for {self.channels} channels, got {c}")

        x = rearrange(latents, "b f c h w -> (b h w) f c")
        attn_in = x + self.position[None].to(x.dtype) if self.position is not None else x
        n = self.norm(attn_in)
        q = rearrange(self.to_q(n), "s f (g d) -> s g f d", g=self.heads)
        k = rearrange(self.to_k(n), "s f (g d) -> s g f d", g=self.heads)
        v = rearrange(self.to_v(n), "s f (g d) -> s g f d", g=self.heads)
        weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)
        out = self.to_out(rearrange(weights @ v, "s g f d -> s f (g d)"))
        return rearrange(x + out, "(b h w) f c -> b f c h w", b=b, h=h, w=w)


def temporal_attention(latents: torch.Tensor, params: TemporalAttention) -> torch.Tensor:
    return params(latents)


class SelfAttention(MaskedCrossAttention):
    """Pre-norm token self-attention with a residual."""

    def __init__(self, dim: int, heads: int = 1):
        super().__init__(dim, dim, heads=heads, pre_norm=True)

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        return hidden + self.attend(hidden, self.norm(hidden))


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 4):
        super().__init__()
        self.net = nn.Sequential(
            nn.LayerNorm(dim),
            nn.Linear(dim, dim * mult),
            nn.GELU(),
            nn.Linear(dim * mult, dim),
        )

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        return hidden + self.net(hidden)


@dataclass
class SiteContext:
    """Conditions resolved for one site, already in the flattened [B*F, ...] layout."""
    reference: torch.Tensor
    lip: Optional[torch.Tensor] = None
    rhythm: Optional[torch.Tensor] = None
    hand_tokens: Optional[torch.Tensor] = None
    head_mask: Optional[torch.Tensor] = None
    hand_mask: Optional[torch.Tensor] = None


class SiteBlock(nn.Module):
    """Attention stack for one site; disabled streams are simply absent."""

    def __init__(self, width: int, cfg: DenoiserConfig, audio_cfg: AudioConfig, code_dim: int):
        super().__init__()
        heads = cfg.num_heads
        self.self_attn = SelfAttention(width, heads)
        self.ref_attn = MaskedCrossAttention(width, width, heads, pre_norm=True)
        self.lip_attn = MaskedCrossAttention(width, audio_cfg.dim, heads, pre_norm=True) if cfg.use_lip_stream else None
        self.rhythm_attn = (
            MaskedCrossAttention(width, audio_cfg.proj_dim, heads, pre_norm=True) if cfg.use_head_stream else None
        )
        self.codebook_attn = (
            MaskedCrossAttention(width, code_dim, heads, pre_norm=True) if cfg.use_hand_stream else None
        )
        self.ff = FeedForward(width)

    def forward(self, hidden: torch.Tensor, ctx: SiteContext) -> torch.Tensor:
        hidden = self.self_attn(hidden)
        hidden = self.ref_attn(hidden, ctx.reference)
        if self.lip_attn is not None:
            hidden = self.lip_attn(hidden, ctx.lip)
        if self.rhythm_attn is not None:
            hidden = self.rhythm_attn(hidden, ctx.rhythm, ctx.head_mask)
        if self.codebook_attn is not None:
            hidden = self.codebook_attn(hidden, ctx.hand_tokens, ctx.hand_mask)
        return self.ff(hidden)


class Denoiser(nn.Module):
    """
    Noise predictor eps_theta(z_t, t, c).

    Args:
        cfg: U-Net geometry and enabled streams.
        audio_cfg: Audio feature and rhythm embedding dims.
        code_dim: Hand codebook entry dimension.
        temporal: Build the stage-2 topology with temporal attention.
    """

    def __init__(self, cfg: DenoiserConfig, audio_cfg: AudioConfig, code_dim: int, temporal: bool = False):
        super().__init__()
        self.cfg = cfg
        self.audio_cfg = audio_cfg
        self.code_dim = code_dim
        w0, w1 = cfg.widths
        temb_dim = 4 * w0
        self.site_widths = dict(zip(cfg.site_resolutions, (w0, w1, w0)))

        self.time_mlp = nn.Sequential(nn.Linear(w0, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.pose_encoder = HandPoseEncoder(cfg)
        self.reference_encoder = ReferenceEncoder(cfg)
        self.rhythm_projector = RhythmProjector(audio_cfg.dim, audio_cfg.proj_dim)

        self.conv_in = nn.Conv2d(cfg.latent_channels + cfg.pose_channels, w0, 3, padding=1)
        self.down_res = ResBlock(w0, w0, temb_dim)
        self.downsample = nn.Conv2d(w0, w1, 3, stride=2, padding=1)
        self.mid_res1 = ResBlock(w1, w1, temb_dim)
        self.mid_res2 = ResBlock(w1, w1, temb_dim)
        self.up_res = ResBlock(w1 + w0, w0, temb_dim)
        self.norm_out = nn.GroupNorm(8, w0)
        self.conv_out = nn.Conv2d(w0, cfg.latent_channels, 3, padding=1)

        self.sites = nn.ModuleDict(
            {name: SiteBlock(width, cfg, audio_cfg, code_dim) for name, width in self.site_widths.items()}
        )
        self.null_reference = nn.ParameterDict(
            {name: nn.Parameter(0.02 * torch.randn(1, 1, width)) for name, width in self.site_widths.items()}
        )
        self.null_lip = nn.Parameter(0.02 * torch.randn(1, 1, audio_cfg.dim))
        self.null_rhythm = nn.Parameter(0.02 * torch.randn(1, 1, audio_cfg.proj_dim))
        self.null_hand = nn.Parameter(0.02 * torch.randn(1, 1, code_dim))

        self.temporal = nn.ModuleDict()
        if temporal:
            self.add_temporal_modules()

    @property
    def has_temporal(self) -> bool:
        return len(self.temporal) > 0

    @property
    def stage(self) -> TrainingStage:
        return TrainingStage.STAGE2 if self.has_temporal else TrainingStage.STAGE1

    def add_temporal_modules(self) -> None:
        """Grow the stage-1 topology into the stage-2 one; new modules start as identity."""
        if self.has_temporal:
            return
        for name, width in self.site_widths.items():
            self.temporal[name] = TemporalAttention(
                width,
                self.cfg.frames_per_clip,
                heads=self.cfg.num_heads,
                position_encoding=self.cfg.temporal_position_encoding,
                zero_out=True,
            )

    def temporal_parameters(self) -> List[nn.Parameter]:
        return list(self.temporal.parameters())

    def forward(self, z_t: torch.Tensor, t: Timestep, bundle: ConditioningBundle) -> torch.Tensor:
        cfg = self.cfg
        video = z_t.ndim == 5
        if video:
            batch, frames = z_t.shape[:2]
            z = z_t.reshape(batch * frames, *z_t.shape[2:])
        elif z_t.ndim == 4:
            batch, frames = z_t.shape[0], 1
            z = z_t
        else:
            raise ShapeError(f"z_t must be [B, C, h, w] or [B, F, C, h, w], got {tuple(z_t.shape)}")
        expected = (cfg.latent_channels, cfg.latent_size, cfg.latent_size)
        if tuple(z.shape[1:]) != expected:
            raise ShapeError(f"noise latent must have shape {expected} per frame, got {tuple(z.shape[1:])}")
        if self.has_temporal and (not video or frames != cfg.frames_per_clip):
            raise ShapeError(f"the temporal topology needs [B, {cfg.frames_per_clip}, ...] clips")

        pose = self._pose_features(bundle, batch, frames)
        contexts = self._site_contexts(bundle, batch, frames)
        temb = self.time_mlp(sinusoidal_embedding(self._timesteps(t, batch, frames, z.device), cfg.widths[0]))

        down_name, mid_name, up_name = self.site_widths
        h = self.conv_in(torch.cat([z, pose.to(z.dtype)], dim=1))
        h = self.down_res(h, temb)
        h = self._site(down_name, h, contexts[down_name], frames)
        skip = h
        h = self.mid_res1(self.downsample(h), temb)
        h = self._site(mid_name, h, contexts[mid_name], frames)
        h = self.mid_res2(h, temb)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.up_res(torch.cat([h, skip], dim=1), temb)
        h = self._site(up_name, h, contexts[up_name], frames)
        out = self.conv_out(F.silu(self.norm_out(h)))
        return out.reshape(batch, frames, *out.shape[1:]) if video else out

    def _site(self, name: str, h: torch.Tensor, ctx: SiteContext, frames: int) -> torch.Tensor:
        side = h.shape[-1]
        tokens = self.sites[name](_tokens(h), ctx)
        h = rearrange(tokens, "n (h w) c -> n c h w", h=side, w=side)
        if name in self.temporal:
            clip = rearrange(h, "(b f) c h w -> b f c h w", f=frames)
            h = rearrange(self.temporal[name](clip), "b f c h w -> (b f) c h w")
        return h

    @staticmethod
    def _timesteps(t: Timestep, batch: int, frames: int, device) -> torch.Tensor:
        steps = torch.as_tensor(t, device=device)
        if steps.ndim == 0:
            steps = steps.expand(batch)
        if tuple(steps.shape) != (batch,):
            raise ShapeError(f"timesteps must be a scalar or [{batch}], got {tuple(steps.shape)}")
        return steps.repeat_interleave(frames)

    def _pose_features(self, bundle: ConditioningBundle, batch: int, frames: int) -> torch.Tensor:
        cfg = self.cfg
        if bundle.pose_features is not None:
            feats = _per_frame(bundle.pose_features, batch, frames, 4, "pose_features")
        elif bundle.pose_maps is not None:
            feats = self.pose_encoder(_per_frame(bundle.pose_maps, batch, frames, 4, "pose_maps"))
        else:
            raise ValueError("conditioning bundle has no pose maps or pose features")
        expected = (cfg.pose_channels, cfg.latent_size, cfg.latent_size)
        if tuple(feats.shape[1:]) != expected:
            raise ShapeError(f"pose features must be {expected} per frame, got {tuple(feats.shape[1:])}")
        return feats

    def _site_contexts(self, bundle: ConditioningBundle, batch: int, frames: int) -> Dict[str, SiteContext]:
        cfg = self.cfg
        rows = batch * frames

        if bundle.drop_image:
            references = {name: self.null_reference[name].expand(rows, -1, -1) for name in self.site_widths}
        else:
            if bundle.reference_features is not None:
                raw = bundle.reference_features
            elif bundle.reference_image is not None:
                raw = self.reference_encoder(bundle.reference_image)
            else:
                raise ValueError("conditioning bundle has no reference input and drop_image is not set")
            missing = set(self.site_widths) - set(raw)
            if missing:
                raise ValueError(f"reference features missing for sites {sorted(missing)}")
            references = {name: _per_frame(raw[name], batch, frames, 3, f"reference[{name}]") for name in self.site_widths}

        hand_tokens = None
        if cfg.use_hand_stream:
            if bundle.drop_image:
                hand_tokens = self.null_hand.expand(rows, -1, -1)
            elif bundle.hand_tokens is None:
                raise ValueError("conditioning bundle has no hand tokens and drop_image is not set")
            else:
                hand_tokens = _per_frame(bundle.hand_tokens, batch, frames, 3, "hand_tokens")

        lip = None
        if cfg.use_lip_stream:
            if bundle.drop_audio:
                lip = self.null_lip.expand(rows, -1, -1)
            elif bundle.lip is None:
                raise ValueError("conditioning bundle has no lip tokens and drop_audio is not set")
            else:
                lip = _per_frame(bundle.lip, batch, frames, 3, "lip")

        rhythm = None
        if cfg.use_head_stream:
            if bundle.drop_audio:
                rhythm = self.null_rhythm.expand(rows, -1, -1)
            elif bundle.rhythm is None:
                raise ValueError("conditioning bundle has no rhythm features and drop_audio is not set")
            else:
                rhythm = project_rhythm(_per_frame(bundle.rhythm, batch, frames, 3, "rhythm"), self.rhythm_projector)

        contexts = {}
        for name in self.site_widths:
            contexts[name] = SiteContext(
                reference=references[name],
                lip=lip,
                rhythm=rhythm,
                hand_tokens=hand_tokens,
                head_mask=self._site_mask(bundle.head_mask, name, batch, frames, "head") if cfg.use_head_stream else None,
                hand_mask=self._site_mask(bundle.hand_mask, name, batch, frames, "hand") if cfg.use_hand_stream else None,
            )
        return contexts

    def _site_mask(self, masks: Optional[Dict[str, MaskLike]], name: str, batch: int, frames: int, what: str) -> torch.Tensor:
        if masks is None or masks.get(name) is None:
            raise ValueError(f"conditioning bundle has no {what} mask for site {name}")
        mask = masks[name]
        data = mask.data if isinstance(mask, RegionMask) else mask
        side = self.cfg.site_resolutions[name]
        if data.shape[-2] != side * side:
            raise ShapeError(f"{what} mask for {name} must cover {side * side} tokens, got {data.shape[-2]}")
        return _per_frame(data, batch, frames, 3, f"{what}_mask[{name}]")


def denoise_forward(
    z_t: torch.Tensor,
    t: Timestep,
    bundle: ConditioningBundle,
    cfg: DenoiserConfig,
    params: Denoiser,
) -> torch.Tensor:
    """
    Predict the injected noise for z_t.

    Raises:
        ConfigError: If `cfg` is not the configuration the model was built with.
        ValueError: If a condition is missing and its drop flag is not set.
    """
    if params.cfg != cfg:
        raise ConfigError("denoiser config does not match the model topology")
    return params(z_t, t, bundle)


def guided_eps(
    model: Denoiser,
    z_t: torch.Tensor,
    t: Timestep,
    bundle: ConditioningBundle,
    guidance: GuidanceConfig,
) -> torch.Tensor:
    """Three passes (unconditional, image only, full) combined with `cfg_combine`."""
    eps_uncond = model(z_t, t, bundle.with_drops(True, True))
    eps_image = model(z_t, t, bundle.with_drops(True, False))
    eps_full = model(z_t, t, bundle.with_drops(False, False))
    return cfg_combine(eps_uncond, eps_image, eps_full, guidance)


def site_masks(
    skeletons: Sequence[Skeleton2D],
    cfg: DenoiserConfig,
    builder: Callable[..., Tuple[RegionMask, bool]],
    dilation: float,
) -> Tuple[Dict[str, torch.Tensor], bool]:
    """
    Rasterize per-frame masks at every site resolution.

    Returns:
        Tuple of ({site: [1, F, N_site, 1]}, True if any frame lacked keypoints).
    """
    frame_hw = (cfg.frame_size, cfg.frame_size)
    masks: Dict[str, torch.Tensor] = {}
    warned = False
    for name, side in cfg.site_resolutions.items():
        per_frame = []
        for skel in skeletons:
            mask, warning = builder(skel, (side, side), frame_hw, dilation)
            per_frame.append(mask.data)
            warned = warned or warning
        masks[name] = torch.stack(per_frame, dim=1)
    return masks, warned


@dataclass
class DenoiserBatch:
    """
    One training batch. z0 is [B, C, h, w] for stage 1 and [B, F, C, h, w] for stage 2.

    Hand crops are only needed when the codebook trains jointly with the denoiser.
    """
    z0: torch.Tensor
    bundle: ConditioningBundle
    left_crops: Optional[torch.Tensor] = None
    right_crops: Optional[torch.Tensor] = None


@dataclass
class StepReport:
    step: int
    loss: float
    noise: float
    vq: float = 0.0
    drop_audio: bool = False
    drop_image: bool = False

    def as_row(self) -> Dict[str, float]:
        return {"step": self.step, "loss": self.loss, "noise": self.noise, "vq": self.vq}


@dataclass
class DenoiserTrainingState:
    """Mutable training state; callers serialize access to it."""
    model: Denoiser
    optimizer: torch.optim.Optimizer
    schedule: NoiseSchedule
    stage: TrainingStage
    config: StageTrainingConfig
    generator: torch.Generator
    parameters: List[nn.Parameter]
    codebook_model: Optional[HandCodebookModel] = None
    online_codebook: bool = False
    step: int = 0
    history: list = field(default_factory=list)


def make_denoiser_training_state(
    model: Denoiser,
    schedule: NoiseSchedule,
    stage: TrainingStage,
    stage_cfg: StageTrainingConfig,
    seed: int = 0,
    codebook_model: Optional[HandCodebookModel] = None,
    online_codebook: bool = False,
) -> DenoiserTrainingState:
    """
    Build optimizer and RNG for one denoiser stage.

    Stage 2 trains only the temporal modules unless `train_spatial` is set.

    Raises:
        ConfigError: If the model topology does not fit the stage, or online
            codebook training is requested without a codebook model.
    """
    stage = TrainingStage(stage)
    if stage is TrainingStage.STAGE1 and model.has_temporal:
        raise ConfigError("stage 1 trains the single-frame topology; got a model with temporal modules")
    if stage is TrainingStage.STAGE2 and not model.has_temporal:
        raise ConfigError("stage 2 needs the temporal topology")
    if stage is TrainingStage.CODEBOOK:
        raise ConfigError("the codebook stage does not train the denoiser")

    if stage is TrainingStage.STAGE2 and not stage_cfg.train_spatial:
        for name, p in model.named_parameters():
            p.requires_grad_(name.startswith("temporal."))
        params = model.temporal_parameters()
    else:
        for p in model.parameters():
            p.requires_grad_(True)
        params = list(model.parameters())

    if online_codebook:
        if codebook_model is None:
            raise ConfigError("online codebook training needs a codebook model")
        params = params + list(codebook_model.parameters())

    opt_cls = torch.optim.AdamW if stage_cfg.optimizer == "adamw" else torch.optim.Adam
    return DenoiserTrainingState(
        model=model,
        optimizer=opt_cls(params, lr=stage_cfg.lr),
        schedule=schedule,
        stage=stage,
        config=stage_cfg,
        generator=torch.Generator().manual_seed(seed),
        parameters=params,
        codebook_model=codebook_model,
        online_codebook=online_codebook,
    )


def _online_hand_tokens(batch: DenoiserBatch, model: HandCodebookModel) -> Tuple[torch.Tensor, torch.Tensor]:
    if batch.left_crops is None or batch.right_crops is None:
        raise ValueError("online codebook training needs left and right hand crops")
    b = batch.left_crops.shape[0]
    model.train()
    _, z_q, indices, losses = model(torch.cat([batch.left_crops, batch.right_crops], dim=0))
    model.quantizer.record_usage(indices)
    tokens = torch.cat(
        [rearrange(z_q[:b], "b d h w -> b (h w) d"), rearrange(z_q[b:], "b d h w -> b (h w) d")],
        dim=1,
    )
    return tokens, losses.total


def _train_step(batch: DenoiserBatch, state: DenoiserTrainingState) -> StepReport:
    model = state.model
    cfg = state.config
    z0 = batch.z0
    if z0.shape[0] == 0:
        raise ValueError("empty training batch")
    model.train()

    # Draw order: timesteps, noise, drop flags.
    gen = state.generator
    t = sample_timesteps(z0.shape[0], state.schedule, gen)
    eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
    draws = torch.rand(2, generator=gen)
    drop_audio = bool(draws[0] < cfg.audio_drop_prob) or batch.bundle.drop_audio
    drop_image = bool(draws[1] < cfg.image_drop_prob) or batch.bundle.drop_image
    bundle = batch.bundle.with_drops(drop_audio, drop_image)

    vq_loss = torch.zeros((), dtype=z0.dtype)
    if state.online_codebook and not drop_image:
        tokens, vq_loss = _online_hand_tokens(batch, state.codebook_model)
        bundle = replace(bundle, hand_tokens=tokens)

    z_t = forward_diffuse(z0, t, eps, state.schedule)
    eps_pred = model(z_t, t, bundle)
    noise = noise_loss(eps, eps_pred)
    loss = noise + vq_loss
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite {state.stage.value} loss at step {state.step}: {float(loss)}")

    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(state.parameters, cfg.grad_clip)
    state.optimizer.step()
    state.step += 1

    report = StepReport(
        step=state.step,
        loss=float(loss.detach()),
        noise=float(noise.detach()),
        vq=float(vq_loss.detach()),
        drop_audio=drop_audio,
        drop_image=drop_image,
    )
    state.history.append(report)
    return report


def train_step_stage1(batch: DenoiserBatch, state: DenoiserTrainingState) -> StepReport:
    """
    One single-frame step of the noise-prediction objective.

    Raises:
        ShapeError: If the batch is not single frames.
        NonFiniteLossError: On a NaN or infinite loss.
    """
    if state.stage is not TrainingStage.STAGE1:
        raise ConfigError(f"training state is for {state.stage.value}, not stage1")
    if batch.z0.ndim != 4:
        raise ShapeError(f"stage 1 batches are single frames [B, C, h, w], got {tuple(batch.z0.shape)}")
    return _train_step(batch, state)


def train_step_stage2(batch: DenoiserBatch, state: DenoiserTrainingState) -> StepReport:
    """
    One clip-level step with the temporal modules in the graph.

    Raises:
        ShapeError: If the batch is not [B, frames_per_clip, C, h, w].
        NonFiniteLossError: On a NaN or infinite loss.
    """
    if state.stage is not TrainingStage.STAGE2:
        raise ConfigError(f"training state is for {state.stage.value}, not stage2")
    frames = state.model.cfg.frames_per_clip
    if batch.z0.ndim != 5 or batch.z0.shape[1] != frames:
        raise ShapeError(f"stage 2 batches are [B, {frames}, C, h, w] clips, got {tuple(batch.z0.shape)}")
    return _train_step(batch, state)
