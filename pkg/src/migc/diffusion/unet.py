"""UNet-lite backbone (32 -> 16 -> 8) with cross-attention at every level.

The mid (lowest-resolution) block and the first decoder block carry an
optional :class:`~migc.core.MIGC` controller; all other attention layers only
see the global prompt.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..core import MIGC, Ablation, AttentionRecorder, to_maps, to_tokens
from ..kernel import Attention, FourierSpec
from ..layout import BoundingBox, rasterize_boxes
from .vocab import PhraseEncoder, ToyVocab

MONITORED_LAYER = "dec16"
MIGC_LAYERS = ("mid", "dec16")


@dataclass
class ModelConfig:
    resolution: int = 32
    channels: tuple[int, int, int] = (32, 48, 64)
    text_dim: int = 32
    head_dim: int = 32
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sample_steps: int = 50
    migc_steps: int | None = None
    cfg_scale: float = 7.5
    max_num: int = 8
    fourier_bands: int = 8
    sac_hidden: int = 16
    migc_layers: tuple[str, ...] = MIGC_LAYERS

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.migc_layers = tuple(self.migc_layers)
        unknown = set(self.migc_layers) - set(MIGC_LAYERS)
        if unknown:
            raise ValueError(f"MIGC can only sit on {MIGC_LAYERS}, got {sorted(unknown)}")
        if self.resolution % 4:
            raise ValueError("resolution must be divisible by 4")
        if self.migc_steps is not None and not 0 <= self.migc_steps <= self.sample_steps:
            raise ValueError("migc_steps must lie in [0, sample_steps]")

    @property
    def resolved_migc_steps(self) -> int:
        if self.migc_steps is None:
            return math.ceil(self.sample_steps / 2)
        return self.migc_steps

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class Conditioning:
    """Batched text + layout conditioning.

    prompt_ids [B, Lp]; prompt_owner [B, Lp] (instance index per prompt token,
    -1 for none); inst_ids [B, K, 2]; boxes [B, K, 4]; valid [B, K].
    """

    prompt_ids: torch.Tensor
    prompt_owner: torch.Tensor
    inst_ids: torch.Tensor
    boxes: torch.Tensor
    valid: torch.Tensor
    extras: dict = field(default_factory=dict)

    @property
    def batch_size(self) -> int:
        return self.prompt_ids.shape[0]

    @property
    def num_instances(self) -> int:
        return self.inst_ids.shape[1]

    @classmethod
    def build(cls, encoder: PhraseEncoder, layouts, k: int | None = None) -> "Conditioning":
        """``layouts``: sequence of ``(prompt_descs, inst_descs, boxes)``.

        Instances are padded with null descriptions and ``[0, 0, 0, 0]`` boxes
        to ``k`` (default: the largest instance count in the batch).
        """
        vocab = encoder.vocab
        if k is None:
            k = max([len(l[1]) for l in layouts] + [0])
        p_ids, owners, i_ids, boxes, valid = [], [], [], [], []
        for prompt_descs, inst_descs, inst_boxes in layouts:
            if len(inst_descs) != len(inst_boxes):
                raise ValueError("one box per instance description")
            if len(inst_descs) > k:
                raise ValueError(f"{len(inst_descs)} instances do not fit in {k} slots")
            p_ids.append(encoder.prompt_ids(prompt_descs))
            owners.append(_prompt_owner(prompt_descs, inst_descs, encoder.max_instances, vocab))
            ids = [vocab.desc_ids(d) for d in inst_descs] + [[vocab.null_id] * 2] * (k - len(inst_descs))
            i_ids.append(torch.tensor(ids, dtype=torch.long).view(k, 2))
            bx = [BoundingBox.coerce(b).check_normalized().as_list() for b in inst_boxes]
            bx += [[0.0] * 4] * (k - len(inst_boxes))
            boxes.append(torch.tensor(bx, dtype=torch.float64).view(k, 4))
            valid.append(torch.tensor([True] * len(inst_descs) + [False] * (k - len(inst_descs))))
        return cls(torch.stack(p_ids), torch.stack(owners), torch.stack(i_ids), torch.stack(boxes),
                   torch.stack(valid))

    @classmethod
    def null(cls, encoder: PhraseEncoder, batch_size: int) -> "Conditioning":
        return cls.build(encoder, [((), (), ())] * batch_size, k=0)

    def masks(self, H: int, W: int, dtype=torch.float32):
        """(instance masks [B, K, H, W], background mask [B, H, W]) at one resolution."""
        m = rasterize_boxes(self.boxes, H, W, dtype=dtype) * self.valid[..., None, None].to(dtype)
        if m.shape[1] == 0:
            bg = torch.ones(m.shape[0], H, W, dtype=dtype)
        else:
            bg = 1 - m.amax(dim=1)
        return m, bg

    def index(self, idx) -> "Conditioning":
        return Conditioning(self.prompt_ids[idx], self.prompt_owner[idx], self.inst_ids[idx], self.boxes[idx],
                            self.valid[idx])


def _prompt_owner(prompt_descs, inst_descs, max_instances, vocab: ToyVocab) -> torch.Tensor:
    owner = [-1] * (2 * max_instances)
    used: set[int] = set()
    norm = [tuple(vocab.desc_ids(d)) for d in inst_descs]
    for j, d in enumerate(prompt_descs):
        key = tuple(vocab.desc_ids(d))
        cands = [i for i, n in enumerate(norm) if n == key and i not in used]
        if not cands:
            continue
        i = j if j in cands else cands[0]
        used.add(i)
        owner[2 * j] = owner[2 * j + 1] = i
    return torch.tensor(owner, dtype=torch.long)


def _groups(c: int) -> int:
    return 8 if c % 8 == 0 else 1


def timestep_embedding(t: torch.Tensor, dim: int, T: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    arg = (t.to(torch.float64) / T * 1000.0)[:, None] * freqs[None]
    return torch.cat([torch.sin(arg), torch.cos(arg)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttnBlock(nn.Module):
    """x + cross-attention residual; the residual comes from MIGC when enabled."""

    def __init__(self, name: str, channels: int, text_dim: int, head_dim: int, migc: MIGC | None = None):
        super().__init__()
        self.name = name
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.attn = Attention(channels, text_dim, head_dim=head_dim)
        self.migc = migc

    def forward(self, x, prompt_ctx, cond: Conditioning | None = None, inst_ctx=None, use_migc=False,
                recorder: AttentionRecorder | None = None, generator=None, shuffle=False):
        B, C, H, W = x.shape
        h = to_tokens(self.norm(x))
        want_probs = recorder is not None and self.name == MONITORED_LAYER
        if want_probs:
            r_global, probs = self.attn(h, prompt_ctx, return_probs=True)
            recorder.record(self.name, probs)
        else:
            r_global = self.attn(h, prompt_ctx)
        if use_migc and self.migc is not None and cond is not None:
            masks, bg = cond.masks(H, W, dtype=x.dtype)
            residual = self.migc(h, H, W, self.attn, prompt_ctx, inst_ctx, cond.boxes.to(x.dtype), cond.valid,
                                 masks, bg, r_global=r_global, generator=generator, shuffle=shuffle)
        else:
            residual = r_global
        return x + to_maps(residual, H, W)


class Upsample(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.conv = nn.Conv2d(c, c, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class UNetLite(nn.Module):
    def __init__(self, config: ModelConfig = ModelConfig(), ablation: Ablation = Ablation()):
        super().__init__()
        self.config = config
        c1, c2, c3 = config.channels
        td = config.text_dim
        hd = config.head_dim
        temb = 4 * c1
        self.encoder = PhraseEncoder(ToyVocab(), td, max_instances=config.max_num)
        self.time_mlp = nn.Sequential(nn.Linear(c1, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.conv_in = nn.Conv2d(3, c1, 3, padding=1)
        self.enc32 = ResBlock(c1, c1, temb)
        self.down1 = nn.Conv2d(c1, c1, 3, stride=2, padding=1)
        self.enc16 = ResBlock(c1, c2, temb)
        self.enc16_attn = CrossAttnBlock("enc16", c2, td, hd)
        self.down2 = nn.Conv2d(c2, c2, 3, stride=2, padding=1)
        self.mid1 = ResBlock(c2, c3, temb)
        self.mid_attn = CrossAttnBlock("mid", c3, td, hd, self._make_migc("mid", c3, ablation))
        self.mid2 = ResBlock(c3, c3, temb)
        self.up1 = Upsample(c3)
        self.dec16 = ResBlock(c3 + c2, c2, temb)
        self.dec16_attn = CrossAttnBlock("dec16", c2, td, hd, self._make_migc("dec16", c2, ablation))
        self.up2 = Upsample(c2)
        self.dec32 = ResBlock(c2 + c1, c1, temb)
        self.dec32_attn = CrossAttnBlock("dec32", c1, td, hd)
        self.norm_out = nn.GroupNorm(_groups(c1), c1)
        self.conv_out = nn.Conv2d(c1, 3, 3, padding=1)

    def _make_migc(self, name, channels, ablation):
        cfg = self.config
        if name not in cfg.migc_layers:
            return None
        return MIGC(channels, cfg.text_dim, cfg.head_dim, cfg.max_num, cfg.sac_hidden,
                    FourierSpec(cfg.fourier_bands), ablation)

    # -- parameter partition ------------------------------------------------

    def migc_modules(self) -> dict[str, MIGC]:
        return {b.name: b.migc for b in (self.mid_attn, self.dec16_attn) if b.migc is not None}

    def migc_parameters(self):
        return [p for m in self.migc_modules().values() for p in m.parameters()]

    def named_backbone_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if ".migc." not in n]

    def backbone_parameters(self):
        return [p for _, p in self.named_backbone_parameters()]

    def freeze_backbone(self):
        for p in self.backbone_parameters():
            p.requires_grad_(False)
        for p in self.migc_parameters():
            p.requires_grad_(True)
        return self

    # -- forward ------------------------------------------------------------

    def forward(self, z, t, cond: Conditioning, use_migc: bool = True, recorder=None, generator=None,
                shuffle: bool = False):
        cfg = self.config
        if z.shape[-1] % 4 or z.shape[-2] % 4:
            raise ValueError("image side must be divisible by 4")
        t = torch.as_tensor(t).reshape(-1).expand(z.shape[0])
        temb = self.time_mlp(timestep_embedding(t, cfg.channels[0], cfg.T).to(z.dtype))
        prompt_ctx = self.encoder.encode_prompt_ids(cond.prompt_ids).to(z.dtype)
        inst_ctx = self.encoder.encode_ids(cond.inst_ids).to(z.dtype)
        kw = dict(cond=cond, inst_ctx=inst_ctx, recorder=recorder, generator=generator, shuffle=shuffle)

        h = self.conv_in(z)
        s32 = self.enc32(h, temb)
        h = self.enc16(self.down1(s32), temb)
        s16 = self.enc16_attn(h, prompt_ctx, **kw)
        h = self.mid1(self.down2(s16), temb)
        h = self.mid_attn(h, prompt_ctx, use_migc=use_migc, **kw)
        h = self.mid2(h, temb)
        h = self.dec16(torch.cat([self.up1(h), s16], dim=1), temb)
        h = self.dec16_attn(h, prompt_ctx, use_migc=use_migc, **kw)
        h = self.dec32(torch.cat([self.up2(h), s32], dim=1), temb)
        h = self.dec32_attn(h, prompt_ctx, **kw)
        return self.conv_out(F.silu(self.norm_out(h)))


def denoise_predict(model: UNetLite, z_t, t, cond: Conditioning, use_migc: bool = True, **kw) -> torch.Tensor:
    return model(z_t, t, cond, use_migc=use_migc, **kw)
