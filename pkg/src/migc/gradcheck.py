"""Finite-difference gradient suite over every trainable block, in float64."""

from __future__ import annotations

from typing import Callable

import torch
import torch.nn as nn

from .core import MIGC, EnhancementAttention, LayoutAttention, PositionNet, ShadingAggregationController
from .kernel import CBAM, Attention, FourierSpec, grad_check
from .layout import build_layout_attention_mask, rasterize_boxes

TOLERANCE = 1e-4

BOXES = torch.tensor([[[0.0, 0.0, 0.5, 0.75], [0.25, 0.25, 1.0, 1.0]]], dtype=torch.float64)


def _perturb(module: nn.Module, gen: torch.Generator, std: float = 0.3) -> nn.Module:
    """Move every parameter off its (possibly zero) init so no gradient is trivially zero."""
    module.double()
    with torch.no_grad():
        for p in module.parameters():
            p.add_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)
    return module


def _probe(out: torch.Tensor, gen: torch.Generator) -> Callable[[torch.Tensor], torch.Tensor]:
    w = torch.randn(out.shape, generator=gen, dtype=out.dtype)
    return lambda y: (y * w).sum()


def _case(module: nn.Module, forward: Callable[[], torch.Tensor], gen, extra_inputs=()):
    inputs = list(module.parameters()) + list(extra_inputs)
    for t in inputs:
        t.requires_grad_(True)
    with torch.no_grad():
        probe = _probe(forward(), gen)
    return (lambda: probe(forward())), inputs


def _rand(gen, *shape, grad=True):
    return torch.randn(shape, generator=gen, dtype=torch.float64).requires_grad_(grad)


def _masks(H, W):
    m = rasterize_boxes(BOXES, H, W, dtype=torch.float64)
    return m, 1 - m.amax(dim=1)


def case_attention(gen):
    attn = _perturb(Attention(6, 5, head_dim=4), gen)
    x, ctx = _rand(gen, 1, 9, 6), _rand(gen, 1, 3, 5)
    return _case(attn, lambda: attn(x, ctx), gen, [x, ctx])


def case_position_mlp(gen):
    net = _perturb(PositionNet(6, FourierSpec(4)), gen)
    return _case(net, lambda: net(BOXES), gen)


def case_ea(gen):
    ea = _perturb(EnhancementAttention(6, 5, head_dim=4, fourier=FourierSpec(4)), gen)
    m, _ = _masks(3, 3)
    h, desc, r_first = _rand(gen, 2, 9, 6), _rand(gen, 2, 2, 5), _rand(gen, 2, 9, 6)
    return _case(ea, lambda: ea(h, desc, BOXES[0], m[0].reshape(2, 9), r_first), gen, [h, desc])


def case_la(gen):
    la = _perturb(LayoutAttention(6, head_dim=4), gen)
    m, bg = _masks(3, 3)
    passes = build_layout_attention_mask(torch.cat([bg[:, None], m], dim=1))
    h = _rand(gen, 1, 9, 6)
    return _case(la, lambda: la(h, passes), gen, [h])


def case_cbam(gen):
    block = _perturb(CBAM(4, reduction=2, kernel_size=3), gen)
    x = _rand(gen, 1, 4, 4, 4)
    return _case(block, lambda: block(x), gen, [x])


def case_sac(gen):
    sac = _perturb(ShadingAggregationController(3, max_num=3, hidden=4, reduction=2, kernel_size=3), gen)
    m, bg = _masks(4, 4)
    inst, bgs, la = _rand(gen, 1, 2, 3, 4, 4), _rand(gen, 1, 3, 4, 4), _rand(gen, 1, 3, 4, 4)
    valid = torch.ones(1, 2, dtype=torch.bool)
    return _case(sac, lambda: sac(inst, m, valid, bgs, bg, la)[0], gen, [inst, bgs, la])


def case_migc(gen):
    frozen = Attention(6, 5, head_dim=4).double()
    migc = _perturb(MIGC(6, 5, head_dim=4, max_num=3, sac_hidden=4, fourier=FourierSpec(4)), gen)
    m, bg = _masks(4, 4)
    h, prompt, inst = _rand(gen, 1, 16, 6), _rand(gen, 1, 4, 5, grad=False), _rand(gen, 1, 2, 2, 5, grad=False)
    valid = torch.ones(1, 2, dtype=torch.bool)
    fwd = lambda: migc(h, 4, 4, frozen, prompt, inst, BOXES, valid, m, bg)  # noqa: E731
    return _case(migc, fwd, gen, [h])


def case_resblock(gen):
    from .diffusion.unet import ResBlock

    blk = _perturb(ResBlock(4, 8, 6), gen, std=0.1)
    x, temb = _rand(gen, 1, 4, 4, 4), _rand(gen, 1, 6)
    return _case(blk, lambda: blk(x, temb), gen, [x, temb])


def case_crossattn(gen):
    from .diffusion.unet import CrossAttnBlock

    blk = _perturb(CrossAttnBlock("enc16", 8, 5, 4), gen, std=0.1)
    x, ctx = _rand(gen, 1, 8, 3, 3), _rand(gen, 1, 3, 5)
    return _case(blk, lambda: blk(x, ctx), gen, [x, ctx])


BLOCKS: dict[str, Callable] = {
    "attention": case_attention,
    "position-MLP": case_position_mlp,
    "EA": case_ea,
    "LA": case_la,
    "CBAM": case_cbam,
    "SAC": case_sac,
    "MIGC": case_migc,
    "backbone-resblock": case_resblock,
    "backbone-crossattn": case_crossattn,
}

SCOPES = {
    "all": tuple(BLOCKS),
    "migc": ("position-MLP", "EA", "LA", "CBAM", "SAC", "MIGC"),
    "backbone": ("attention", "backbone-resblock", "backbone-crossattn"),
}


def run_suite(scope: str = "all", seed: int = 0, eps: float = 1e-6, blocks: dict | None = None) -> list[dict]:
    """``[{"block", "max_rel_err", "n_params", "passed"}]`` for each block in ``scope``."""
    blocks = BLOCKS if blocks is None else blocks
    names = SCOPES.get(scope, (scope,)) if blocks is BLOCKS else tuple(blocks)
    rows = []
    for name in names:
        if name not in blocks:
            raise KeyError(f"unknown gradcheck block {name!r}")
        gen = torch.Generator().manual_seed(seed)
        fn, inputs = blocks[name](gen)
        err = grad_check(fn, inputs, eps=eps)
        rows.append({"block": name, "max_rel_err": err, "n_params": sum(t.numel() for t in inputs),
                     "passed": err < TOLERANCE})
    return rows
