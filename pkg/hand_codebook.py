"""
Hand codebook: a VQ-VAE trained offline on hand crops whose quantized
embeddings become hand-prior tokens for the denoiser.

The encoder downsamples with residual blocks and ends in a self-attention
bottleneck, the quantizer assigns every grid cell to its nearest codebook
entry (lowest index on ties) and the decoder mirrors the encoder.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from config_manager import CodebookConfig
from enums import HandSide
from errors import CheckpointError, ConfigError, NonFiniteLossError, ShapeError

logger = logging.getLogger(__name__)

# Rows of the distance matrix computed at once during nearest-neighbour search.
_SEARCH_CHUNK = 4096


@dataclass
class Codebook:
    """
    Snapshot of the discrete hand prior.

    Attributes:
        entries (torch.Tensor): [K, D_code] embedding table.
        usage_counts (torch.Tensor): [K] assignment counts accumulated in training.
    """
    entries: torch.Tensor
    usage_counts: torch.Tensor = None

    def __post_init__(self):
        if self.entries.ndim != 2:
            raise ShapeError("codebook entries must be [K, D_code]")
        if self.usage_counts is None:
            self.usage_counts = torch.zeros(self.entries.shape[0], dtype=torch.long)

    @property
    def size(self) -> int:
        return int(self.entries.shape[0])

    @property
    def dim(self) -> int:
        return int(self.entries.shape[1])


@dataclass
class HandCrop:
    """A square RGB hand crop with values in [-1, 1]."""
    pixels: torch.Tensor
    side: HandSide = HandSide.LEFT

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise ShapeError(f"hand crop must be [3, H, W], got {tuple(self.pixels.shape)}")
        if self.pixels.shape[1] != self.pixels.shape[2]:
            raise ShapeError("hand crops must be square")
        if not torch.isfinite(self.pixels).all():
            raise ValueError("hand crop contains non-finite values")
        if self.pixels.min() < -1.0 or self.pixels.max() > 1.0:
            raise ValueError("hand crop values must lie in [-1, 1]")


@dataclass
class QuantizedHands:
    """
    Quantized left/right hand embeddings and their flattened token sequence.

    `tokens` holds the left grid's cells (row-major) followed by the right grid's.
    """
    z_q_left: torch.Tensor
    z_q_right: torch.Tensor
    indices_left: torch.Tensor
    indices_right: torch.Tensor
    tokens: torch.Tensor


@dataclass
class VqLosses:
    """
    VQ-VAE objective terms; total = reconstruction + codebook + beta * commitment.
    """
    reconstruction: torch.Tensor
    codebook: torch.Tensor
    commitment: torch.Tensor
    beta: float = 0.25

    @property
    def total(self) -> torch.Tensor:
        return self.reconstruction + self.codebook + self.beta * self.commitment

    def as_floats(self) -> Dict[str, float]:
        return {
            "reconstruction": float(self.reconstruction),
            "codebook": float(self.codebook),
            "commitment": float(self.commitment),
            "total": float(self.total),
        }


class _StraightThrough(torch.autograd.Function):
    """Forward returns the quantized values exactly; backward is the identity onto z_e."""

    @staticmethod
    def forward(ctx, z_e: torch.Tensor, z_q: torch.Tensor) -> torch.Tensor:
        return z_q.clone()

    @staticmethod
    def backward(ctx, grad_output: torch.Tensor):
        return grad_output, None


def nearest_indices(vectors: torch.Tensor, entries: torch.Tensor) -> torch.Tensor:
    """
    Exhaustive nearest-neighbour search under squared L2.

    Distances are exact squared differences so results agree with brute force
    bit-for-bit; torch.argmin picks the first minimum, i.e. the lowest index.
    """
    if entries.shape[0] == 0:
        raise ValueError("codebook is empty")
    if vectors.shape[-1] != entries.shape[-1]:
        raise ShapeError(
            f"vector dim {vectors.shape[-1]} does not match codebook dim {entries.shape[-1]}"
        )
    out = []
    for start in range(0, vectors.shape[0], _SEARCH_CHUNK):
        chunk = vectors[start:start + _SEARCH_CHUNK]
        distances = ((chunk[:, None, :] - entries[None, :, :]) ** 2).sum(dim=-1)
        out.append(distances.argmin(dim=1))
    if not out:
        return torch.zeros(0, dtype=torch.long, device=vectors.device)
    return torch.cat(out)


def quantize(
    z_e: torch.Tensor,
    cb: Union[Codebook, torch.Tensor],
    beta: float = 0.25,
) -> Tuple[torch.Tensor, torch.Tensor, VqLosses]:
    """
    Map every grid cell of `z_e` ([D, h, w] or [B, D, h, w]) to its nearest entry.

    Returns:
        Tuple of (z_q with straight-through gradient, indices [.., h, w],
        VqLosses with a zero reconstruction term).
    """
    entries = cb.entries if isinstance(cb, Codebook) else cb
    if entries.shape[0] == 0:
        raise ValueError("codebook is empty")
    unbatched = z_e.ndim == 3
    if unbatched:
        z_e = z_e.unsqueeze(0)
    if z_e.ndim != 4 or z_e.shape[1] != entries.shape[1]:
        raise ShapeError(
            f"z_e must be [B, {entries.shape[1]}, h, w], got {tuple(z_e.shape)}"
        )
    b, _, h, w = z_e.shape
    flat = rearrange(z_e, "b d h w -> (b h w) d")
    with torch.no_grad():
        indices = nearest_indices(flat.detach(), entries.detach())
    z_q_flat = entries[indices]

    codebook_loss = ((flat.detach() - z_q_flat) ** 2).mean()
    commitment_loss = ((flat - z_q_flat.detach()) ** 2).mean()

    z_q_st = _StraightThrough.apply(flat, z_q_flat)
    z_q = rearrange(z_q_st, "(b h w) d -> b d h w", b=b, h=h, w=w)
    indices = indices.reshape(b, h, w)
    losses = VqLosses(
        reconstruction=torch.zeros((), dtype=z_e.dtype, device=z_e.device),
        codebook=codebook_loss,
        commitment=commitment_loss,
        beta=beta,
    )
    if unbatched:
        return z_q[0], indices[0], losses
    return z_q, indices, losses


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.GroupNorm(8, channels),
            nn.SiLU(),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.GroupNorm(8, channels),
            nn.SiLU(),
            nn.Conv2d(channels, channels, 3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.block(x)


class SpatialSelfAttention(nn.Module):
    """Single-head self-attention over the cells of a feature map."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(8, channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).chunk(3, dim=1)
        q = rearrange(q, "b c h w -> b (h w) c")
        k = rearrange(k, "b c h w -> b (h w) c")
        v = rearrange(v, "b c h w -> b (h w) c")
        weights = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(c), dim=-1)
        out = rearrange(weights @ v, "b (h w) c -> b c h w", h=h, w=w)
        return x + self.proj(out)


class HandEncoder(nn.Module):
    def __init__(self, cfg: CodebookConfig):
        super().__init__()
        width = cfg.hidden_channels
        layers = [nn.Conv2d(3, width, 3, padding=1)]
        for _ in range(cfg.num_downsamples):
            layers += [ResidualBlock(width) for _ in range(cfg.res_blocks_per_level)]
            layers.append(nn.Conv2d(width, width, 4, stride=2, padding=1))
        layers += [
            ResidualBlock(width),
            SpatialSelfAttention(width),
            ResidualBlock(width),
            nn.GroupNorm(8, width),
            nn.SiLU(),
            nn.Conv2d(width, cfg.code_dim, 1),
        ]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class HandDecoder(nn.Module):
    def __init__(self, cfg: CodebookConfig):
        super().__init__()
        width = cfg.hidden_channels
        layers = [
            nn.Conv2d(cfg.code_dim, width, 3, padding=1),
            ResidualBlock(width),
            SpatialSelfAttention(width),
            ResidualBlock(width),
        ]
        for _ in range(cfg.num_downsamples):
            layers += [ResidualBlock(width) for _ in range(cfg.res_blocks_per_level)]
            layers += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(width, width, 3, padding=1)]
        layers += [nn.GroupNorm(8, width), nn.SiLU(), nn.Conv2d(width, 3, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, z_q: torch.Tensor) -> torch.Tensor:
        return self.net(z_q)


class VectorQuantizer(nn.Module):
    """Learnable codebook plus accumulated usage counts."""

    def __init__(self, cfg: CodebookConfig):
        super().__init__()
        self.beta = cfg.beta
        self.embedding = nn.Parameter(
            torch.empty(cfg.codebook_size, cfg.code_dim).uniform_(
                -1.0 / cfg.codebook_size, 1.0 / cfg.codebook_size
            )
        )
        self.register_buffer("usage_counts", torch.zeros(cfg.codebook_size, dtype=torch.long))

    def forward(self, z_e: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, VqLosses]:
        return quantize(z_e, self.embedding, beta=self.beta)

    @torch.no_grad()
    def record_usage(self, indices: torch.Tensor) -> None:
        self.usage_counts += torch.bincount(
            indices.reshape(-1), minlength=self.usage_counts.shape[0]
        ).to(self.usage_counts.device)

    def codebook(self) -> Codebook:
        return Codebook(entries=self.embedding.detach().clone(), usage_counts=self.usage_counts.clone())


class HandCodebookModel(nn.Module):
    """Encoder + quantizer + decoder with the configured grid geometry."""

    def __init__(self, cfg: CodebookConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = HandEncoder(cfg)
        self.quantizer = VectorQuantizer(cfg)
        self.decoder = HandDecoder(cfg)
        # Set once weights come from training or a checkpoint.
        self.register_buffer("pretrained", torch.zeros((), dtype=torch.bool))

    @property
    def is_pretrained(self) -> bool:
        return bool(self.pretrained)

    def mark_pretrained(self) -> None:
        self.pretrained.fill_(True)

    def forward(self, x: torch.Tensor):
        z_e = self.encoder(x)
        z_q, indices, losses = self.quantizer(z_e)
        recon = self.decoder(z_q)
        losses.reconstruction = F.mse_loss(recon, x)
        return recon, z_q, indices, losses


def _as_batch(img: Union[HandCrop, torch.Tensor]) -> Tuple[torch.Tensor, bool]:
    pixels = img.pixels if isinstance(img, HandCrop) else img
    if pixels.ndim == 3:
        return pixels.unsqueeze(0), True
    return pixels, False


def encode(img: Union[HandCrop, torch.Tensor], model: HandCodebookModel) -> torch.Tensor:
    """
    Encode a crop ([3, H, W] or batched) to a [D_code, Q_h, Q_w] latent grid.

    Raises:
        ConfigError: If the crop size does not match the configured image size.
    """
    x, unbatched = _as_batch(img)
    size = model.cfg.image_size
    if x.shape[1] != 3 or x.shape[-2:] != (size, size):
        raise ConfigError(
            f"encoder expects [.., 3, {size}, {size}] crops, got {tuple(x.shape)}"
        )
    z_e = model.encoder(x)
    return z_e[0] if unbatched else z_e


def decode(z_q: torch.Tensor, model: HandCodebookModel) -> torch.Tensor:
    """
    Decode a quantized grid back to an image shaped like the encoder input.

    Raises:
        ShapeError: If the grid does not match [D_code, Q_h, Q_w].
    """
    unbatched = z_q.ndim == 3
    grid = z_q.unsqueeze(0) if unbatched else z_q
    cfg = model.cfg
    expected = (cfg.code_dim, cfg.grid_size, cfg.grid_size)
    if grid.ndim != 4 or tuple(grid.shape[1:]) != expected:
        raise ShapeError(f"decoder expects [.., {expected}], got {tuple(z_q.shape)}")
    out = model.decoder(grid)
    return out[0] if unbatched else out


@dataclass
class VqTrainingState:
    """Mutable training state; callers serialize access to it."""
    model: HandCodebookModel
    optimizer: torch.optim.Optimizer
    step: int = 0
    history: list = field(default_factory=list)


def make_training_state(model: HandCodebookModel, lr: float, optimizer: str = "adam") -> VqTrainingState:
    opt_cls = torch.optim.Adam if optimizer == "adam" else torch.optim.AdamW
    return VqTrainingState(model=model, optimizer=opt_cls(model.parameters(), lr=lr))


def vq_training_step(batch: torch.Tensor, state: VqTrainingState) -> VqLosses:
    """
    One gradient step on reconstruction + codebook + beta * commitment.

    Raises:
        ValueError: If the batch is empty.
        NonFiniteLossError: If any loss term is NaN or infinite.
    """
    if batch.shape[0] == 0:
        raise ValueError("empty training batch")
    model = state.model
    model.train()
    _, _, indices, losses = model(batch)
    total = losses.total
    if not torch.isfinite(total):
        raise NonFiniteLossError(
            f"non-finite VQ loss at step {state.step}: {losses.as_floats()}"
        )
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    model.quantizer.record_usage(indices)
    state.step += 1
    return VqLosses(
        reconstruction=losses.reconstruction.detach(),
        codebook=losses.codebook.detach(),
        commitment=losses.commitment.detach(),
        beta=losses.beta,
    )


def embed_hand_batch(
    left: torch.Tensor,
    right: torch.Tensor,
    model: HandCodebookModel,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, VqLosses]:
    """
    Batched hand-token extraction: [B, 3, H, W] crops -> tokens [B, 2*Q_h*Q_w, D_code].

    Gradients flow through the straight-through path, which is what joint
    (online) codebook training relies on.
    """
    crops = torch.cat([left, right], dim=0)
    z_e = encode(crops, model)
    z_q, indices, losses = model.quantizer(z_e)
    b = left.shape[0]
    tokens = torch.cat(
        [
            rearrange(z_q[:b], "b d h w -> b (h w) d"),
            rearrange(z_q[b:], "b d h w -> b (h w) d"),
        ],
        dim=1,
    )
    return tokens, indices[:b], indices[b:], losses


def hcc_embed(left: HandCrop, right: HandCrop, model: HandCodebookModel) -> QuantizedHands:
    """
    Encode and quantize a left/right crop pair with a pretrained codebook.

    Raises:
        CheckpointError: If the model has not been trained or loaded.
    """
    if not model.is_pretrained:
        raise CheckpointError("hand codebook weights are missing; train or load a checkpoint first")
    model.eval()
    with torch.no_grad():
        tokens, idx_l, idx_r, _ = embed_hand_batch(
            left.pixels.unsqueeze(0), right.pixels.unsqueeze(0), model
        )
        entries = model.quantizer.embedding
        z_q_left = rearrange(entries[idx_l[0]], "h w d -> d h w")
        z_q_right = rearrange(entries[idx_r[0]], "h w d -> d h w")
    return QuantizedHands(
        z_q_left=z_q_left,
        z_q_right=z_q_right,
        indices_left=idx_l[0],
        indices_right=idx_r[0],
        tokens=tokens[0],
    )


def codebook_stats(indices: Union[torch.Tensor, np.ndarray, Iterable[int]], codebook_size: int) -> Tuple[float, float]:
    """
    Usage fraction and perplexity of an index collection.

    Returns:
        Tuple of (|distinct indices| / K, exp(entropy of the empirical distribution)).
    """
    if isinstance(indices, torch.Tensor):
        flat = indices.detach().cpu().numpy().reshape(-1)
    else:
        flat = np.asarray(list(indices) if not isinstance(indices, np.ndarray) else indices).reshape(-1)
    if flat.size == 0:
        raise ValueError("codebook_stats needs at least one index")
    counts = np.bincount(flat.astype(np.int64), minlength=codebook_size)
    usage = float(np.count_nonzero(counts)) / float(codebook_size)
    probs = counts[counts > 0] / counts.sum()
    entropy = float(-(probs * np.log(probs)).sum())
    return usage, float(np.exp(entropy))


def heldout_mse(model: HandCodebookModel, images: torch.Tensor, batch_size: int = 64) -> float:
    """Mean reconstruction MSE of decode(quantize(encode(x))) over `images`."""
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            x = images[start:start + batch_size]
            recon, _, _, _ = model(x)
            total += float(((recon - x) ** 2).sum())
            count += x.numel()
    return total / max(count, 1)
