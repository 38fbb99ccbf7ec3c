"""Deterministic DDIM sampling with guidance; MIGC drives the early steps only."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from ..layout import BoundingBox
from .data import from_model_space
from .schedule import NoiseSchedule, cfg_combine, ddim_step
from .unet import Conditioning, UNetLite


@dataclass
class GenerationRequest:
    """Global prompt descriptions, instance descriptions and boxes, plus sampler settings.

    ``migc_steps=None`` resolves to ``ceil(steps / 2)``.
    """

    prompt: list
    instances: list
    boxes: list
    seed: int = 0
    steps: int = 50
    cfg_scale: float = 7.5
    migc_steps: int | None = None
    use_migc: bool = True
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.instances) != len(self.boxes):
            raise ValueError("one box per instance")
        self.boxes = [BoundingBox.coerce(b).check_normalized().as_list() for b in self.boxes]
        if self.steps < 1:
            raise ValueError("steps must be positive")
        if self.migc_steps is not None and not 0 <= self.migc_steps <= self.steps:
            raise ValueError("migc_steps must lie in [0, steps]")

    @property
    def resolved_migc_steps(self) -> int:
        if not self.use_migc:
            return 0
        if self.migc_steps is None:
            return -(-self.steps // 2)
        return self.migc_steps

    def settings(self) -> dict:
        return {"seed": self.seed, "steps": self.steps, "cfg_scale": self.cfg_scale,
                "migc_steps": self.resolved_migc_steps, "use_migc": self.use_migc}


def initial_noise(seed: int, shape) -> torch.Tensor:
    return torch.randn(shape, generator=torch.Generator().manual_seed(int(seed)))


@torch.no_grad()
def sample(model: UNetLite, requests: list[GenerationRequest], schedule: NoiseSchedule,
           uncond_migc: bool = False, clip_x0: bool = True) -> torch.Tensor:
    """Images [B, 3, H, W] in [0, 1] for a batch of requests sharing steps / scale / MIGC steps."""
    if not requests:
        raise ValueError("no requests")
    head = requests[0]
    for r in requests:
        if (r.steps, r.cfg_scale, r.resolved_migc_steps) != (head.steps, head.cfg_scale, head.resolved_migc_steps):
            raise ValueError("requests in one batch must share steps, cfg_scale and migc_steps")
    res = model.config.resolution
    B = len(requests)
    cond = Conditioning.build(model.encoder, [(r.prompt, r.instances, r.boxes) for r in requests])
    uncond = Conditioning.null(model.encoder, B) if not uncond_migc else Conditioning(
        torch.zeros_like(cond.prompt_ids), cond.prompt_owner, cond.inst_ids, cond.boxes, cond.valid)
    z = torch.stack([initial_noise(r.seed, (3, res, res)) for r in requests])
    ts = schedule.sampling_timesteps(head.steps)
    n_migc = head.resolved_migc_steps
    for i, t in enumerate(ts):
        use = i < n_migc
        tt = torch.full((B,), t, dtype=torch.long)
        eps_c = model(z, tt, cond, use_migc=use)
        if head.cfg_scale == 1.0:
            eps = eps_c
        else:
            eps_u = model(z, tt, uncond, use_migc=use and uncond_migc)
            eps = cfg_combine(eps_u, eps_c, head.cfg_scale)
        ab_t = schedule.alpha_bar(t).to(z.dtype)
        ab_prev = schedule.alpha_bar(ts[i + 1] if i + 1 < len(ts) else 0).to(z.dtype)
        if clip_x0:
            x0 = ((z - (1 - ab_t).sqrt() * eps) / ab_t.sqrt()).clamp(-1, 1)
            eps = (z - ab_t.sqrt() * x0) / (1 - ab_t).sqrt()
        z, _ = ddim_step(z, eps, ab_t, ab_prev)
    return from_model_space(z)


def to_uint8(images: torch.Tensor):
    """[B, 3, H, W] in [0, 1] -> numpy uint8 [B, H, W, 3]."""
    return (images.clamp(0, 1) * 255).round().to(torch.uint8).permute(0, 2, 3, 1).numpy()
