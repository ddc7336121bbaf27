"""Noise schedule, forward diffusion, training loss, DDIM sampling and
classifier-free guidance.

The sampler is deterministic (eta=0): given a seed, the initial per-frame
noise is the only random input, so repeated runs are bitwise identical in
single-threaded mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import torch
from torch import Tensor

from .errors import ConfigError, InputDomainError, ModelError, ShapeError
from .utils import new_generator

if TYPE_CHECKING:
    from .affinity import AffinitySchedule
    from .denoiser import Denoiser, PromptEmbedding

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
DEFAULT_DDIM_STEPS = 25
DEFAULT_CFG_SCALE = 7.5


@dataclass(frozen=True)
class NoiseSchedule:
    """Beta/alpha-bar tables (1-indexed timesteps) plus the DDIM sub-sequence."""

    T: int
    beta: Tensor  # [T]
    alpha_bar: Tensor  # [T], strictly decreasing
    ddim_steps: tuple[int, ...] = field(default=())

    def alpha_bar_at(self, t: int) -> float:
        """Cumulative signal retention at timestep t; t=0 means clean data."""
        if t == 0:
            return 1.0
        if not (1 <= t <= self.T):
            raise InputDomainError(f"timestep {t} outside [0, {self.T}]")
        return float(self.alpha_bar[t - 1])

    def config_dict(self) -> dict:
        return {
            "T": self.T,
            "beta_start": float(self.beta[0]),
            "beta_end": float(self.beta[-1]),
            "ddim_steps": len(self.ddim_steps),
        }


def build_schedule(
    T: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
    ddim_count: int = DEFAULT_DDIM_STEPS,
) -> NoiseSchedule:
    """Linear beta schedule with a uniform-stride DDIM sub-sequence ending at T."""
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    if not (1 <= ddim_count <= T):
        raise ConfigError(f"ddim_count must be in [1, {T}], got {ddim_count}")

    beta = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alpha_bar = torch.cumprod(1.0 - beta, dim=0)
    ddim_steps = tuple((T * (i + 1)) // ddim_count for i in range(ddim_count))
    return NoiseSchedule(T=T, beta=beta, alpha_bar=alpha_bar, ddim_steps=ddim_steps)


def forward_diffuse(z0: Tensor, t: int, eps: Tensor, sched: NoiseSchedule) -> Tensor:
    """z_t = sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps."""
    if z0.shape != eps.shape:
        raise ShapeError(f"z0 {tuple(z0.shape)} vs eps {tuple(eps.shape)}")
    if not (1 <= t <= sched.T):
        raise InputDomainError(f"timestep {t} outside [1, {sched.T}]")
    abar = sched.alpha_bar_at(t)
    return (abar ** 0.5) * z0 + ((1.0 - abar) ** 0.5) * eps


def noise_prediction_loss(eps_true: Tensor, eps_pred: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    if eps_true.shape != eps_pred.shape:
        raise ShapeError(f"eps_true {tuple(eps_true.shape)} vs eps_pred {tuple(eps_pred.shape)}")
    return (eps_pred - eps_true).pow(2).mean()


def cfg_combine(eps_uncond: Tensor, eps_cond: Tensor, w: float) -> Tensor:
    """Classifier-free guidance: eps_u + w * (eps_c - eps_u)."""
    if eps_uncond.shape != eps_cond.shape:
        raise ShapeError(f"uncond {tuple(eps_uncond.shape)} vs cond {tuple(eps_cond.shape)}")
    return eps_uncond + w * (eps_cond - eps_uncond)


def ddim_step(
    z_t: Tensor,
    eps_hat: Tensor,
    t: int,
    t_prev: int,
    sched: NoiseSchedule,
    z0_clip: float | None = None,
) -> Tensor:
    """Deterministic DDIM update from timestep t to t_prev (t_prev=0 is clean).

    ``z0_clip`` bounds the implied clean-latent estimate (static thresholding).
    At large t the inversion divides by a tiny sqrt(alpha_bar), so small noise
    mispredictions otherwise explode the trajectory; legal latents for this
    codec live in [-1, 1] exactly, which makes the bound lossless.
    """
    if t_prev >= t:
        raise InputDomainError(f"need t_prev < t, got ({t_prev}, {t})")
    abar_t = sched.alpha_bar_at(t)
    abar_prev = sched.alpha_bar_at(t_prev)
    if abar_t == 0.0:
        raise InputDomainError(f"alpha_bar at t={t} is zero; cannot invert")
    z0_hat = (z_t - ((1.0 - abar_t) ** 0.5) * eps_hat) / (abar_t ** 0.5)
    if z0_clip is not None:
        z0_hat = z0_hat.clamp(-z0_clip, z0_clip)
    return (abar_prev ** 0.5) * z0_hat + ((1.0 - abar_prev) ** 0.5) * eps_hat


def sample_video(
    model: "Denoiser",
    z_cond: Tensor,
    schedule: "AffinitySchedule",
    prompt: "PromptEmbedding",
    sched: NoiseSchedule,
    w: float = DEFAULT_CFG_SCALE,
    seed: int = 0,
    frame_count: int | None = None,
    capture: list | None = None,
    conditioned: bool = True,
    z0_clip: float | None = 1.0,
) -> Tensor:
    """Generate F latent frames conditioned on a clean condition latent.

    Each frame's initial latent is drawn independently from the seed; the
    unconditional guidance branch zeroes both condition inputs and uses a
    null prompt mirroring training dropout. With ``conditioned=False`` the
    guided branch also sees zeroed condition inputs (the inference-time
    conditioning ablation). Returns the final z0 latents.
    """
    from .affinity import expand_to_map
    from .denoiser import null_prompt

    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            raise ModelError(f"non-finite parameter {name!r}")

    frames = frame_count if frame_count is not None else schedule.frame_count
    if schedule.frame_count != frames:
        raise ShapeError(
            f"affinity schedule has {schedule.frame_count} frames, expected {frames}"
        )
    c, h, wdt = z_cond.shape
    if c != model.config.latent_channels:
        raise ShapeError(f"condition latent has {c} channels, model expects {model.config.latent_channels}")

    maps = expand_to_map(schedule, h, wdt)
    zero_cond = torch.zeros_like(z_cond)
    zero_maps = torch.zeros_like(maps)
    nul = null_prompt(model)

    gen = new_generator(seed)
    z = torch.randn(frames, c, h, wdt, generator=gen, dtype=torch.float32)

    cond_latent = z_cond if conditioned else zero_cond
    cond_maps = maps if conditioned else zero_maps

    # both guidance branches ride one batched forward: index 0 carries the
    # conditioned branch, index 1 the unconditional branch
    from .text import PromptEmbedding

    both_prompts = PromptEmbedding(
        tokens=torch.stack([prompt.tokens, nul.tokens]),
        mask=torch.stack([prompt.mask, nul.mask]),
    )
    both_cond = torch.stack([cond_latent, zero_cond])
    both_maps = torch.stack([cond_maps, zero_maps])

    steps = list(sched.ddim_steps)
    prev_steps = [0] + steps[:-1]
    model.eval()
    with torch.no_grad():
        for t, t_prev in zip(reversed(steps), reversed(prev_steps)):
            pair = model(
                torch.stack([z, z]), t, both_prompts, both_cond, both_maps, capture=capture
            )
            eps = cfg_combine(pair[1], pair[0], w)
            z = ddim_step(z, eps, t, t_prev, sched, z0_clip=z0_clip)
    return z
