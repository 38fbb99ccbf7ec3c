"""Noise schedule, forward process, DDIM update and guidance mixing."""

from __future__ import annotations

import math

import torch


class NoiseSchedule:
    """Linear-beta DDPM schedule over ``T`` steps; ``t`` runs 1..T."""

    def __init__(self, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        self.T = T
        self.beta_start = beta_start
        self.beta_end = beta_end
        betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
        self.alphas_cumprod = torch.cumprod(1 - betas, dim=0)

    @classmethod
    def from_alphas_cumprod(cls, alphas_cumprod: torch.Tensor, beta_start: float, beta_end: float):
        obj = cls.__new__(cls)
        obj.T = len(alphas_cumprod)
        obj.beta_start, obj.beta_end = beta_start, beta_end
        obj.alphas_cumprod = torch.as_tensor(alphas_cumprod, dtype=torch.float64)
        return obj

    def alpha_bar(self, t) -> torch.Tensor:
        """ᾱ_t with ᾱ_0 = 1 by convention."""
        t = torch.as_tensor(t)
        ab = torch.cat([torch.ones(1, dtype=torch.float64), self.alphas_cumprod])
        return ab[t]

    def check_t(self, t) -> torch.Tensor:
        t = torch.as_tensor(t)
        if (t < 1).any() or (t > self.T).any():
            raise ValueError(f"timestep outside [1, {self.T}]")
        return t

    def sampling_timesteps(self, steps: int) -> list[int]:
        """Descending, evenly spaced timesteps ending near 1."""
        if not 1 <= steps <= self.T:
            raise ValueError("sampling steps must lie in [1, T]")
        stride = self.T / steps
        return [int(math.floor(self.T - i * stride)) for i in range(steps)]


def forward_noise(z0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule, alpha_bar=None) -> torch.Tensor:
    """z_t = √ᾱ_t z0 + √(1-ᾱ_t) ε.  ``t`` may be a scalar or one entry per batch row.

    ``alpha_bar`` overrides the schedule lookup (used to probe the limits).
    """
    if alpha_bar is None:
        ab = schedule.alpha_bar(schedule.check_t(t))
    else:
        ab = torch.as_tensor(alpha_bar, dtype=torch.float64)
    ab = ab.to(z0.dtype)
    if ab.dim() == 1:
        ab = ab.view(-1, *([1] * (z0.dim() - 1)))
    return ab.sqrt() * z0 + (1 - ab).sqrt() * eps


def ddim_step(z_t, eps_hat, ab_t, ab_prev):
    """Deterministic (eta = 0) DDIM update."""
    x0 = (z_t - (1 - ab_t).sqrt() * eps_hat) / ab_t.sqrt()
    return ab_prev.sqrt() * x0 + (1 - ab_prev).sqrt() * eps_hat, x0


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, scale: float) -> torch.Tensor:
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError("guidance branches disagree on shape")
    return eps_uncond + scale * (eps_cond - eps_uncond)
