"""Two-stage training: backbone on global prompts, then the controller on a frozen backbone."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass

import torch

from ..core import AttentionRecorder
from .data import Corpus, to_model_space
from .schedule import NoiseSchedule, forward_noise
from .unet import MONITORED_LAYER, Conditioning, UNetLite

log = logging.getLogger(__name__)


class NumericalAbort(RuntimeError):
    """A loss or gradient went non-finite."""


@dataclass
class TrainConfig:
    lam: float = 0.1
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 10
    k_train: int = 4
    seed: int = 0
    cond_drop: float = 0.1  # backbone stage only
    weight_decay: float = 0.0
    shuffle_slots: bool = True
    n_images: int = 5000
    backbone_epochs: int = 30
    backbone_lr: float = 1e-4

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.batch_size < 1 or self.epochs < 0 or self.backbone_epochs < 0:
            raise ValueError("batch_size must be positive and epoch counts non-negative")
        if self.lr <= 0 or self.backbone_lr <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 <= self.cond_drop < 1:
            raise ValueError("cond_drop must lie in [0, 1)")
        if self.k_train < 1:
            raise ValueError("k_train must be positive")

    def as_dict(self) -> dict:
        return asdict(self)


def inhibition_loss(maps: torch.Tensor, bg_mask: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
    """Σ_i Σ_pixels |A_i - mean_bg(A_i)| on the background, averaged over the batch.

    maps [B, N, H, W] (or [B, N, HW]), bg_mask [B, H, W] (or [B, HW]),
    valid [B, N] selects real instances.  An empty background contributes 0.
    """
    B, N = maps.shape[:2]
    A = maps.reshape(B, N, -1)
    m = bg_mask.reshape(B, 1, -1).to(A.dtype)
    area = m.sum(-1, keepdim=True)
    mean = (A * m).sum(-1, keepdim=True) / area.clamp_min(1)
    dev = ((A - mean).abs() * m).sum(-1)
    if valid is not None:
        dev = dev * valid.to(dev.dtype)
    return dev.sum(1).mean()


def reduce_instance_maps(probs: torch.Tensor, owner: torch.Tensor, k: int) -> torch.Tensor:
    """Average attention columns of each instance's prompt tokens.

    probs [B, HW, L]; owner [B, L] with -1 for unowned tokens -> [B, k, HW].
    Instances with no prompt token get an all-zero map.
    """
    onehot = (owner.unsqueeze(-1) == torch.arange(k)).to(probs.dtype)  # [B, L, k]
    counts = onehot.sum(1).clamp_min(1)
    return torch.einsum("bpl,blk->bkp", probs, onehot) / counts.unsqueeze(-1)


def param_hash(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _check(losses: dict[str, torch.Tensor], t: torch.Tensor):
    bad = [k for k, v in losses.items() if not torch.isfinite(v).all()]
    if bad:
        raise NumericalAbort(
            f"non-finite {', '.join(bad)} at timesteps {t.tolist()[:8]}...; "
            + ", ".join(f"{k}={float(v.detach()):.4g}" for k, v in losses.items())
        )


def training_step(model: UNetLite, images: torch.Tensor, cond: Conditioning, config: TrainConfig,
                  schedule: NoiseSchedule, optimizer: torch.optim.Optimizer | None, stage: str = "migc",
                  generator: torch.Generator | None = None) -> dict[str, float]:
    """One optimizer step.  ``stage`` is ``"backbone"`` (global prompt only) or ``"migc"``."""
    if stage not in ("backbone", "migc"):
        raise ValueError(f"unknown stage {stage!r}")
    B = images.shape[0]
    z0 = to_model_space(images)
    t = torch.randint(1, schedule.T + 1, (B,), generator=generator)
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    z_t = forward_noise(z0, t, eps, schedule)
    if stage == "backbone":
        if config.cond_drop > 0:
            drop = torch.rand(B, generator=generator) < config.cond_drop
            null_ids = torch.zeros_like(cond.prompt_ids)
            cond = Conditioning(torch.where(drop[:, None], null_ids, cond.prompt_ids), cond.prompt_owner,
                                cond.inst_ids, cond.boxes, cond.valid)
        eps_hat = model(z_t, t, cond, use_migc=False)
        l_ldm = ((eps_hat - eps) ** 2).mean()
        l_ihbt = torch.zeros((), dtype=l_ldm.dtype)
    else:
        recorder = AttentionRecorder() if config.lam > 0 else None
        eps_hat = model(z_t, t, cond, use_migc=True, recorder=recorder, generator=generator,
                        shuffle=config.shuffle_slots)
        l_ldm = ((eps_hat - eps) ** 2).mean()
        if recorder is not None:
            probs = recorder[MONITORED_LAYER]
            res = int(math.isqrt(probs.shape[1]))
            maps = reduce_instance_maps(probs, cond.prompt_owner, cond.num_instances)
            _, bg = cond.masks(res, res, dtype=probs.dtype)
            l_ihbt = inhibition_loss(maps, bg, cond.valid)
        else:
            l_ihbt = torch.zeros((), dtype=l_ldm.dtype)
    total = l_ldm + config.lam * l_ihbt
    _check({"L_LDM": l_ldm, "L_ihbt": l_ihbt, "L_total": total}, t)
    if optimizer is not None:
        optimizer.zero_grad(set_to_none=True)
        total.backward()
        optimizer.step()
    return {"L_LDM": float(l_ldm.detach()), "L_ihbt": float(l_ihbt.detach()), "L_total": float(total.detach())}


def make_optimizer(params, lr: float, weight_decay: float = 0.0) -> torch.optim.Optimizer:
    return torch.optim.AdamW([p for p in params if p.requires_grad], lr=lr, weight_decay=weight_decay)


def _run_epochs(model, corpus: Corpus, config: TrainConfig, schedule, optimizer, stage, epochs, k,
                generator, callback=None):
    curve = []
    n = len(corpus)
    for epoch in range(epochs):
        order = torch.randperm(n, generator=generator)
        sums = {"L_LDM": 0.0, "L_ihbt": 0.0, "L_total": 0.0}
        steps = 0
        for s in range(0, n - config.batch_size + 1, config.batch_size):
            idx = order[s:s + config.batch_size]
            cond = corpus.conditioning(model.encoder, idx, k=k)
            out = training_step(model, corpus.images[idx], cond, config, schedule, optimizer, stage, generator)
            for key in sums:
                sums[key] += out[key]
            steps += 1
        row = {"epoch": epoch + 1, **{key: v / max(steps, 1) for key, v in sums.items()}}
        curve.append(row)
        log.info("%s epoch %d: %s", stage, epoch + 1, row)
        if callback is not None:
            callback(row)
    return curve


def train_backbone(model: UNetLite, corpus: Corpus, config: TrainConfig, schedule: NoiseSchedule,
                   callback=None) -> list[dict]:
    """Stage 0: every parameter outside the controllers, global prompts only."""
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    for p in model.parameters():
        p.requires_grad_(False)
    for p in model.backbone_parameters():
        p.requires_grad_(True)
    opt = make_optimizer(model.backbone_parameters(), config.backbone_lr, config.weight_decay)
    return _run_epochs(model, corpus, config, schedule, opt, "backbone", config.backbone_epochs,
                       config.k_train, gen, callback)


def train_migc(model: UNetLite, corpus: Corpus, config: TrainConfig, schedule: NoiseSchedule,
               callback=None) -> list[dict]:
    """Stage 1: controllers only; the backbone hash must not move."""
    torch.manual_seed(config.seed + 1)
    gen = torch.Generator().manual_seed(config.seed + 1)
    model.freeze_backbone()
    before = param_hash(model.backbone_parameters())
    opt = make_optimizer(model.migc_parameters(), config.lr, config.weight_decay)
    curve = _run_epochs(model, corpus, config, schedule, opt, "migc", config.epochs, config.k_train, gen, callback)
    if param_hash(model.backbone_parameters()) != before:
        raise RuntimeError("frozen backbone parameters changed during controller training")
    return curve
