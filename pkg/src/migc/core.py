"""Divide / conquer / combine shading on one cross-attention layer.

Shapes follow the token convention used by the backbone: image features are
``[B, H*W, C]`` tokens, text is ``[B, L, c_txt]``.  The small functional
wrappers near the bottom expose the same operations on single ``[C, H, W]``
maps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .kernel import CBAM, MLP, Attention, FourierSpec, fourier_embed, masked_softmax
from .layout import build_layout_attention_mask


class ChannelBudgetError(ValueError):
    """More instances than the aggregation controller has slots for."""

    def __init__(self, n: int, max_num: int):
        super().__init__(
            f"{n} instances exceed the aggregation channel budget max_num={max_num}; "
            "raise max_num (model.max_num) and retrain the controller"
        )
        self.n = n
        self.max_num = max_num


class AttentionRecorder:
    """Per-request sink for attention maps captured at monitored layers."""

    def __init__(self):
        self.maps: dict[str, torch.Tensor] = {}

    def record(self, name: str, probs: torch.Tensor) -> None:
        self.maps[name] = probs

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.maps[name]


def to_tokens(x: torch.Tensor) -> torch.Tensor:
    """[B, C, H, W] -> [B, H*W, C]"""
    return x.flatten(2).transpose(1, 2)


def to_maps(t: torch.Tensor, H: int, W: int) -> torch.Tensor:
    """[B, H*W, C] -> [B, C, H, W]"""
    return t.transpose(1, 2).reshape(t.shape[0], t.shape[2], H, W)


class PositionNet(nn.Module):
    """Box -> one position token: MLP over the Fourier embedding."""

    def __init__(self, out_dim: int, fourier: FourierSpec = FourierSpec(), hidden: int | None = None):
        super().__init__()
        self.fourier = fourier
        self.mlp = MLP(fourier.out_dim, out_dim, hidden=hidden)

    def forward(self, boxes: torch.Tensor) -> torch.Tensor:
        emb = fourier_embed(boxes, self.fourier).to(self.mlp.net[0].weight.dtype)
        return self.mlp(emb).unsqueeze(-2)  # [..., 1, out_dim]


def make_grounded_tokens(desc_tokens: torch.Tensor, boxes: torch.Tensor, position_net: PositionNet) -> torch.Tensor:
    """Text tokens [..., L_text, c] followed by position tokens [..., L_pos, c]."""
    return torch.cat([desc_tokens, position_net(boxes)], dim=-2)


class EnhancementAttention(nn.Module):
    """Trainable cross-attention over grounded phrase tokens, masked to the box."""

    def __init__(self, query_dim: int, text_dim: int, head_dim: int = 32,
                 fourier: FourierSpec = FourierSpec(), pos_hidden: int | None = None):
        super().__init__()
        self.position_net = PositionNet(text_dim, fourier, hidden=pos_hidden)
        self.attn = Attention(query_dim, text_dim, head_dim=head_dim, zero_out=True)

    def forward(self, h, desc_tokens, boxes, mask_flat, r_first):
        grounded = make_grounded_tokens(desc_tokens, boxes, self.position_net)
        return r_first + self.attn(h, grounded) * mask_flat.unsqueeze(-1)


class LayoutAttention(nn.Module):
    """Self-attention over pixels restricted to pixel pairs sharing a region."""

    def __init__(self, dim: int, head_dim: int = 32):
        super().__init__()
        self.attn = Attention(dim, dim, head_dim=head_dim)

    def forward(self, h: torch.Tensor, passes: torch.Tensor) -> torch.Tensor:
        return self.attn(h, mask=passes)


class ShadingAggregationController(nn.Module):
    """Per-pixel convex weights over shading results.

    Intra-attention (conv -> CBAM -> conv) collapses each shading result plus
    its guidance mask to one map; inter-attention runs a CBAM whose channel
    axis is the ``max_num + 2`` slots, and a 1x1 conv yields per-slot logits.

    Slot layout: ``[instances and padding (max_num) | background | template]``.
    """

    def __init__(self, channels: int, max_num: int = 8, hidden: int = 16,
                 reduction: int = 4, kernel_size: int = 7):
        super().__init__()
        self.max_num = max_num
        self.intra = nn.Sequential(
            nn.Conv2d(channels + 1, hidden, 3, padding=1),
            nn.SiLU(),
            CBAM(hidden, reduction, kernel_size),
            nn.Conv2d(hidden, 1, 3, padding=1),
        )
        slots = max_num + 2
        self.inter = CBAM(slots, reduction, kernel_size)
        self.head = nn.Conv2d(slots, slots, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    @property
    def slots(self) -> int:
        return self.max_num + 2

    def intra_features(self, shading: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """shading [M, C, H, W], mask [M, H, W] -> [M, H, W]"""
        return self.intra(torch.cat([shading, mask.unsqueeze(1).to(shading.dtype)], dim=1))[:, 0]

    def padding_feature(self, channels: int, H: int, W: int, dtype) -> torch.Tensor:
        zero = torch.zeros(1, channels, H, W, dtype=dtype)
        return self.intra_features(zero, torch.zeros(1, H, W, dtype=dtype))[0]

    def slot_weights(self, f: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        logits = self.head(self.inter(f))
        return masked_softmax(logits, valid[:, :, None, None], dim=1)

    def forward(self, inst, inst_masks, inst_valid, bg, bg_mask, la, la_valid=None,
                generator: torch.Generator | None = None, shuffle: bool = False):
        """Aggregate shading results.

        inst [B, K, C, H, W], inst_masks [B, K, H, W], inst_valid [B, K] bool,
        bg / la [B, C, H, W], bg_mask [B, H, W], la_valid [B] bool.
        Returns ``(R_final [B, C, H, W], weights [B, max_num+2, H, W])``.
        """
        B, K, C, H, W = inst.shape
        if K > self.max_num:
            raise ChannelBudgetError(K, self.max_num)
        if la_valid is None:
            la_valid = torch.ones(B, dtype=torch.bool)
        f_pad = self.padding_feature(C, H, W, inst.dtype)
        f_inst = self.intra_features(inst.reshape(B * K, C, H, W), inst_masks.reshape(B * K, H, W)).view(B, K, H, W)
        f_inst = torch.where(inst_valid[:, :, None, None], f_inst, f_pad)
        f_bg = self.intra_features(bg, bg_mask)
        f_la = self.intra_features(la, torch.ones_like(bg_mask))
        f, shading, valid = pad_shading_channels(
            f_inst, f_bg, f_la, f_pad, self.max_num,
            inst, bg, la, inst_valid, la_valid,
        )
        if shuffle:
            f, shading, valid = shuffle_instance_slots(f, shading, valid, self.max_num, generator)
        weights = self.slot_weights(f, valid)
        return (weights.unsqueeze(2) * shading).sum(dim=1), weights


def pad_shading_channels(f_inst, f_bg, f_la, f_pad, max_num, inst=None, bg=None, la=None,
                         inst_valid=None, la_valid=None):
    """Fill the controller's ``max_num + 2`` slots.

    Instance features occupy the first slots, copies of the zero-input feature
    ``f_pad`` fill up to ``max_num``, then background and template.  When the
    shading maps are supplied they are laid out the same way (padding slots
    hold zeros) together with a slot-validity mask.
    """
    B, K, H, W = f_inst.shape
    if K > max_num:
        raise ChannelBudgetError(K, max_num)
    pads = f_pad.expand(B, max_num - K, H, W)
    f = torch.cat([f_inst, pads, f_bg[:, None], f_la[:, None]], dim=1)
    if inst is None:
        return f
    C = inst.shape[2]
    zeros = inst.new_zeros(B, max_num - K, C, H, W)
    shading = torch.cat([inst, zeros, bg[:, None], la[:, None]], dim=1)
    valid = torch.cat([
        inst_valid,
        torch.zeros(B, max_num - K, dtype=torch.bool),
        torch.ones(B, 1, dtype=torch.bool),
        la_valid.view(B, 1),
    ], dim=1)
    return f, shading, valid


def shuffle_instance_slots(f, shading, valid, max_num, generator=None):
    """Permute instance/padding slots per sample; background and template stay put."""
    B = f.shape[0]
    perms = torch.stack([torch.randperm(max_num, generator=generator) for _ in range(B)])
    tail = torch.arange(max_num, max_num + 2).expand(B, 2)
    order = torch.cat([perms, tail], dim=1)  # [B, S]
    idx = torch.arange(B)[:, None]
    return f[idx, order], shading[idx, order], valid[idx, order]


@dataclass
class ShadingSet:
    """Shading results of one layer, all [B, ., C, H, W] maps on the pixel grid."""

    first: torch.Tensor  # R_f per instance  [B, K, C, H, W]
    instance: torch.Tensor  # R_s per instance [B, K, C, H, W]
    background: torch.Tensor  # [B, C, H, W]
    template: torch.Tensor  # [B, C, H, W]
    weights: torch.Tensor | None = None
    extras: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Ablation:
    use_ea: bool = True
    use_la: bool = True
    use_sac: bool = True

    @classmethod
    def from_name(cls, name: str | None) -> "Ablation":
        if not name or name == "loss":
            return cls()
        if name == "ea":
            return cls(use_ea=False)
        if name == "la":
            return cls(use_la=False)
        if name == "sac":
            return cls(use_sac=False)
        raise ValueError(f"unknown ablation {name!r}; expected one of ea, la, sac, loss")


class MIGC(nn.Module):
    """Multi-instance shading controller attached to one frozen cross-attention.

    The returned residual is ``R_global + gate(R_final - R_global)`` where the
    token-wise ``gate`` starts at zero: an untrained controller leaves the
    frozen layer's output untouched.
    """

    def __init__(self, channels: int, text_dim: int, head_dim: int = 32, max_num: int = 8,
                 sac_hidden: int = 16, fourier: FourierSpec = FourierSpec(),
                 ablation: Ablation = Ablation()):
        super().__init__()
        self.ablation = ablation
        self.max_num = max_num
        self.ea = EnhancementAttention(channels, text_dim, head_dim, fourier)
        self.la = LayoutAttention(channels, head_dim)
        self.sac = ShadingAggregationController(channels, max_num, sac_hidden)
        self.gate = nn.Linear(channels, channels)
        nn.init.zeros_(self.gate.weight)
        nn.init.zeros_(self.gate.bias)

    def shade(self, h, H, W, frozen: Attention, prompt_ctx, inst_ctx, boxes, inst_valid, inst_masks, bg_mask,
              r_global=None):
        """Stages 1-2 per instance plus background and template shading.

        h [B, HW, C]; inst_ctx [B, K, L, c]; boxes [B, K, 4]; inst_masks [B, K, H, W]; bg_mask [B, H, W].
        """
        B, HW, C = h.shape
        K = inst_ctx.shape[1]
        if K > self.max_num:
            raise ChannelBudgetError(K, self.max_num)
        if r_global is None:
            r_global = frozen(h, prompt_ctx)
        m_flat = inst_masks.reshape(B, K, HW).to(h.dtype)
        h_rep = h.unsqueeze(1).expand(B, K, HW, C).reshape(B * K, HW, C)
        ctx = inst_ctx.reshape(B * K, *inst_ctx.shape[2:])
        r_first = frozen(h_rep, ctx) * m_flat.reshape(B * K, HW, 1)
        if self.ablation.use_ea:
            r_inst = self.ea(h_rep, ctx, boxes.reshape(B * K, 4), m_flat.reshape(B * K, HW), r_first)
        else:
            r_inst = r_first
        r_bg = r_global * bg_mask.reshape(B, HW, 1).to(h.dtype)
        if self.ablation.use_la:
            members = torch.cat([bg_mask.unsqueeze(1), inst_masks], dim=1)
            r_la = self.la(h, build_layout_attention_mask(members))
        else:
            r_la = torch.zeros_like(h)
        return ShadingSet(
            first=to_maps(r_first, H, W).view(B, K, C, H, W),
            instance=to_maps(r_inst, H, W).view(B, K, C, H, W),
            background=to_maps(r_bg, H, W),
            template=to_maps(r_la, H, W),
        )

    def aggregate(self, s: ShadingSet, inst_masks, inst_valid, bg_mask, generator=None, shuffle=False):
        B = s.background.shape[0]
        la_valid = torch.full((B,), self.ablation.use_la, dtype=torch.bool)
        if self.ablation.use_sac:
            return self.sac(s.instance, inst_masks, inst_valid, s.background, bg_mask, s.template,
                            la_valid, generator=generator, shuffle=shuffle)
        return mask_average(s.instance, inst_masks, inst_valid, s.background, bg_mask, s.template, la_valid)

    def forward(self, h, H, W, frozen: Attention, prompt_ctx, inst_ctx, boxes, inst_valid, inst_masks, bg_mask,
                r_global=None, generator=None, shuffle=False, return_shading=False):
        if r_global is None:
            r_global = frozen(h, prompt_ctx)
        s = self.shade(h, H, W, frozen, prompt_ctx, inst_ctx, boxes, inst_valid, inst_masks, bg_mask,
                       r_global=r_global)
        r_final, weights = self.aggregate(s, inst_masks, inst_valid, bg_mask, generator, shuffle)
        s.weights = weights
        r_final_tok = to_tokens(r_final)
        residual = r_global + self.gate(r_final_tok - r_global)
        if return_shading:
            s.extras["final"] = r_final
            return residual, s
        return residual


def mask_average(inst, inst_masks, inst_valid, bg, bg_mask, la, la_valid):
    """Controller-free aggregation: uniform weights over slots whose mask covers the pixel."""
    B, K, C, H, W = inst.shape
    m = inst_masks * inst_valid[:, :, None, None].to(inst.dtype)
    la_m = la_valid.to(inst.dtype)[:, None, None, None].expand(B, 1, H, W)
    masks = torch.cat([m, bg_mask.unsqueeze(1).to(inst.dtype), la_m], dim=1)
    shading = torch.cat([inst, bg[:, None], la[:, None]], dim=1)
    weights = masks / masks.sum(dim=1, keepdim=True).clamp_min(1e-12)
    return (weights.unsqueeze(2) * shading).sum(dim=1), weights


# ---------------------------------------------------------------------------
# single-map functional forms
# ---------------------------------------------------------------------------


def _check_grid(feat: torch.Tensor, mask: torch.Tensor):
    if feat.shape[-2:] != mask.shape[-2:]:
        raise ValueError(f"mask {tuple(mask.shape[-2:])} does not match features {tuple(feat.shape[-2:])}")


def cross_attention_shading(image_feat, desc_tokens, mask, attn: Attention) -> torch.Tensor:
    """Masked cross-attention residual: [C, H, W] features, [L, c] text, [H, W] mask."""
    _check_grid(image_feat, mask)
    C, H, W = image_feat.shape
    r = attn(to_tokens(image_feat[None]), desc_tokens[None])
    return to_maps(r, H, W)[0] * mask.to(r.dtype)


background_shading = cross_attention_shading


def enhancement_attention(image_feat, grounded, mask, r_first, ea: EnhancementAttention) -> torch.Tensor:
    """R_s = R_f + EA(features, grounded tokens) inside the mask; [C, H, W] in and out."""
    _check_grid(image_feat, mask)
    C, H, W = image_feat.shape
    r = ea.attn(to_tokens(image_feat[None]), grounded[None])
    return r_first + to_maps(r, H, W)[0] * mask.to(r.dtype)


def layout_attention(image_feat, passes, la: LayoutAttention) -> torch.Tensor:
    C, H, W = image_feat.shape
    return to_maps(la(to_tokens(image_feat[None]), passes[None]), H, W)[0]


def sac_aggregate(shading: torch.Tensor, masks: torch.Tensor, sac: ShadingAggregationController,
                  la_valid: bool = True):
    """Aggregate ``[N+2, C, H, W]`` results ordered (instances..., background, template).

    masks: ``[N+2, H, W]`` guidance masks in the same order.  Returns
    ``(R_final [C, H, W], weights [max_num+2, H, W])``.
    """
    n = shading.shape[0] - 2
    if n > sac.max_num:
        raise ChannelBudgetError(n, sac.max_num)
    inst, bg, la = shading[:n], shading[n], shading[n + 1]
    valid = masks[:n].flatten(1).any(1)
    r, w = sac(inst[None], masks[:n][None], valid[None], bg[None], masks[n][None], la[None],
               torch.tensor([la_valid]))
    return r[0], w[0]
