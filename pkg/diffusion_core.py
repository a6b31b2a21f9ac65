"""
Noise schedules, forward diffusion, the ancestral reverse step, the
noise-prediction loss and two-condition classifier-free guidance.

Everything here is a pure function of its inputs. Timesteps index
0..T-1 with alpha_bars[0] = alphas[0].
"""
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import torch

from config_manager import GuidanceConfig
from enums import ScheduleKind
from errors import ConfigError, ShapeError

Timestep = Union[int, torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    """
    Variance schedule tables.

    Attributes:
        betas (torch.Tensor): beta_t per step, float64, all in (0, 1).
        alphas (torch.Tensor): 1 - beta_t.
        alpha_bars (torch.Tensor): running product of alphas, strictly decreasing.
    """
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor

    @property
    def num_steps(self) -> int:
        return int(self.betas.shape[0])


def build_schedule(
    num_steps: int,
    beta_start: float,
    beta_end: float,
    kind: ScheduleKind = ScheduleKind.LINEAR,
) -> NoiseSchedule:
    """
    Build a linear beta schedule and its derived tables.

    Raises:
        ConfigError: If the beta range or step count is invalid.
    """
    if num_steps < 1:
        raise ConfigError("num_steps must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"invalid beta range ({beta_start}, {beta_end}); need 0 < start <= end < 1"
        )
    if ScheduleKind(kind) is not ScheduleKind.LINEAR:
        raise ConfigError(f"unsupported schedule kind {kind}")

    if num_steps == 1:
        betas = torch.tensor([beta_start], dtype=torch.float64)
    else:
        betas = torch.linspace(beta_start, beta_end, num_steps, dtype=torch.float64)
    alphas = 1.0 - betas

    # Explicit running product so alpha_bars[t] == alpha_bars[t-1] * alphas[t] bit-exactly.
    products = []
    running = 1.0
    for a in alphas.tolist():
        running = running * a
        products.append(running)
    alpha_bars = torch.tensor(products, dtype=torch.float64)
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _gather(table: torch.Tensor, t: Timestep, like: torch.Tensor) -> torch.Tensor:
    """Look up per-step coefficients, broadcastable against `like`."""
    num_steps = table.shape[0]
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        if t.ndim != 1 or t.shape[0] != like.shape[0]:
            raise ShapeError("per-sample timesteps must be a 1-D tensor of batch length")
        if bool((t < 0).any()) or bool((t >= num_steps).any()):
            raise ValueError(f"timestep out of range [0, {num_steps})")
        values = table.to(like.device)[t.long().to(like.device)].to(like.dtype)
        return values.reshape(-1, *([1] * (like.ndim - 1)))
    step = int(t)
    if not 0 <= step < num_steps:
        raise ValueError(f"timestep {step} out of range [0, {num_steps})")
    return table[step].to(dtype=like.dtype, device=like.device)


def forward_diffuse(
    z0: torch.Tensor,
    t: Timestep,
    eps: torch.Tensor,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """Closed-form marginal z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    _check_same_shape(z0, eps, "forward_diffuse")
    abar = _gather(sched.alpha_bars, t, z0)
    return abar.sqrt() * z0 + (1.0 - abar).sqrt() * eps


def forward_step(
    z_prev: torch.Tensor,
    t: int,
    noise: torch.Tensor,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """One stepwise transition q(z_t | z_{t-1}) = N(sqrt(1 - beta_t) z_{t-1}, beta_t I)."""
    _check_same_shape(z_prev, noise, "forward_step")
    beta = _gather(sched.betas, t, z_prev)
    return (1.0 - beta).sqrt() * z_prev + beta.sqrt() * noise


def denoise_step(
    z_t: torch.Tensor,
    t: int,
    eps_pred: torch.Tensor,
    sched: NoiseSchedule,
    noise: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """
    Ancestral DDPM update from predicted noise to z_{t-1}.

    The noise term uses sigma_t = sqrt(beta_t) and is dropped at t = 1.

    Raises:
        ValueError: If t = 0 or t is out of range.
        ShapeError: If shapes disagree.
    """
    step = int(t)
    if step == 0:
        raise ValueError("denoise_step at t=0: nothing to step to")
    _check_same_shape(z_t, eps_pred, "denoise_step")
    if noise is not None:
        _check_same_shape(z_t, noise, "denoise_step")

    alpha = _gather(sched.alphas, step, z_t)
    beta = _gather(sched.betas, step, z_t)
    abar = _gather(sched.alpha_bars, step, z_t)

    mean = (z_t - (beta / (1.0 - abar).sqrt()) * eps_pred) / alpha.sqrt()
    if step == 1 or noise is None:
        return mean
    return mean + beta.sqrt() * noise


def noise_loss(eps: torch.Tensor, eps_pred: torch.Tensor) -> torch.Tensor:
    """Mean squared error between injected and predicted noise."""
    _check_same_shape(eps, eps_pred, "noise_loss")
    return ((eps - eps_pred) ** 2).mean()


def cfg_combine(
    eps_uncond: torch.Tensor,
    eps_imageonly: torch.Tensor,
    eps_full: torch.Tensor,
    g: GuidanceConfig,
) -> torch.Tensor:
    """Sequential guidance: unconditional -> image -> image + audio."""
    _check_same_shape(eps_uncond, eps_imageonly, "cfg_combine")
    _check_same_shape(eps_uncond, eps_full, "cfg_combine")
    return (
        eps_uncond
        + g.image_scale * (eps_imageonly - eps_uncond)
        + g.audio_scale * (eps_full - eps_imageonly)
    )


def sample_timesteps(batch: int, sched: NoiseSchedule, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Uniform training timesteps in [0, T)."""
    return torch.randint(0, sched.num_steps, (batch,), generator=generator)


def sample_loop(
    model_fn: Callable[[torch.Tensor, int], torch.Tensor],
    shape: Sequence[int],
    sched: NoiseSchedule,
    generator: Optional[torch.Generator] = None,
    dtype: torch.dtype = torch.float32,
    device: Union[str, torch.device] = "cpu",
) -> torch.Tensor:
    """
    Run the ancestral chain from pure noise at t = T-1 down to t = 1.

    Args:
        model_fn: Maps (z_t, t) to predicted noise of the same shape.
        shape: Latent shape to sample.
        sched: Noise schedule.
        generator: Seeded generator for reproducible draws.

    Returns:
        torch.Tensor: The index-0 latent.
    """
    z = torch.randn(tuple(shape), generator=generator, dtype=dtype).to(device)
    for step in range(sched.num_steps - 1, 0, -1):
        eps_pred = model_fn(z, step)
        noise = torch.randn(tuple(shape), generator=generator, dtype=dtype).to(device)
        z = denoise_step(z, step, eps_pred, sched, noise)
    return z
