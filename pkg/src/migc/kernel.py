"""Dense numeric kernel: softmax, masked attention, Fourier box features, CBAM
and a central-difference gradient checker.

Everything here is a thin layer over torch tensors.  Autograd supplies the
analytic gradients; :func:`grad_check` is the independent finite-difference
route used to audit them.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import torch
import torch.nn as nn

NEG_INF = float("-inf")


class NonFiniteError(ValueError):
    """Raised when a kernel op sees or would produce NaN/Inf values."""


class GradCheckWarning(RuntimeWarning):
    pass


def check_finite(x: torch.Tensor, name: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"{name} contains non-finite values")
    return x


# ---------------------------------------------------------------------------
# softmax / attention
# ---------------------------------------------------------------------------


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Max-shifted softmax. Rejects non-finite input."""
    if not -x.dim() <= dim < max(x.dim(), 1):
        raise IndexError(f"axis {dim} out of range for a {x.dim()}-d tensor")
    check_finite(x, "softmax input")
    shifted = x - x.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def masked_softmax(logits: torch.Tensor, allowed: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Softmax restricted to ``allowed`` entries; rows with nothing allowed are 0.

    Banned entries are filled with -inf before the shift, so they contribute
    exact zeros forward and backward.
    """
    shifted = logits.masked_fill(~allowed.expand_as(logits), NEG_INF)
    row_max = shifted.amax(dim=dim, keepdim=True).detach()
    row_max = torch.where(torch.isfinite(row_max), row_max, torch.zeros_like(row_max))
    e = torch.exp(shifted - row_max)
    total = e.sum(dim=dim, keepdim=True)
    return e / torch.where(total > 0, total, torch.ones_like(total))


def additive_mask(passes: torch.Tensor, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Boolean pass/ban predicate -> additive mask with 0 / -inf entries."""
    zero = torch.zeros((), dtype=dtype)
    return torch.where(passes.bool(), zero, torch.full((), NEG_INF, dtype=dtype))


def attention_probs(
    q: torch.Tensor, k: torch.Tensor, additive: torch.Tensor | None = None
) -> torch.Tensor:
    """``softmax(q kᵀ / √d + mask)`` over the key axis, leading dims batched.

    ``additive`` is either a float mask (finite entries or -inf) or a boolean
    pass predicate.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if additive is None:
        return softmax(logits, dim=-1)
    if additive.shape[-2:] != logits.shape[-2:]:
        raise ValueError(f"mask shape {tuple(additive.shape)} does not match logits {tuple(logits.shape)}")
    if additive.dtype == torch.bool:
        return masked_softmax(logits, additive, dim=-1)
    if torch.isnan(additive).any() or (additive == float("inf")).any():
        raise NonFiniteError("additive mask may only contain finite values or -inf")
    allowed = torch.isfinite(additive)
    finite_part = torch.where(allowed, additive, torch.zeros((), dtype=additive.dtype))
    return masked_softmax(logits + finite_part.to(logits.dtype), allowed, dim=-1)


def scaled_dot_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    additive_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """``softmax(q kᵀ/√d + mask) v``.

    q: [..., Lq, d], k: [..., Lk, d], v: [..., Lk, c]. Rows whose mask bans every
    key produce zeros.
    """
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    return attention_probs(q, k, additive_mask) @ v


@dataclass(frozen=True)
class AttentionConfig:
    head_dim: int
    num_heads: int = 1

    def __post_init__(self):
        if self.head_dim <= 0 or self.num_heads <= 0:
            raise ValueError("head_dim and num_heads must be positive")

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.head_dim)

    @property
    def inner_dim(self) -> int:
        return self.head_dim * self.num_heads


class Attention(nn.Module):
    """Projected (cross-)attention over token sequences.

    x: [B, Lq, query_dim], context: [B, Lk, context_dim] -> [B, Lq, query_dim].
    ``zero_out`` zero-initialises the output projection so the block starts
    as an exact no-op residual.
    """

    def __init__(self, query_dim: int, context_dim: int | None = None, head_dim: int = 32,
                 num_heads: int = 1, zero_out: bool = False):
        super().__init__()
        context_dim = query_dim if context_dim is None else context_dim
        self.config = AttentionConfig(head_dim, num_heads)
        inner = self.config.inner_dim
        self.to_q = nn.Linear(query_dim, inner, bias=False)
        self.to_k = nn.Linear(context_dim, inner, bias=False)
        self.to_v = nn.Linear(context_dim, inner, bias=False)
        self.to_out = nn.Linear(inner, query_dim)
        if zero_out:
            nn.init.zeros_(self.to_out.weight)
            nn.init.zeros_(self.to_out.bias)

    def _split(self, t: torch.Tensor) -> torch.Tensor:
        b, n, _ = t.shape
        return t.view(b, n, self.config.num_heads, self.config.head_dim).transpose(1, 2)

    def forward(self, x, context=None, mask=None, return_probs: bool = False):
        context = x if context is None else context
        q = self._split(self.to_q(x))
        k = self._split(self.to_k(context))
        v = self._split(self.to_v(context))
        if mask is not None and mask.dim() == 3:
            mask = mask.unsqueeze(1)
        probs = attention_probs(q, k, mask)
        out = (probs @ v).transpose(1, 2).reshape(x.shape[0], x.shape[1], self.config.inner_dim)
        out = self.to_out(out)
        if return_probs:
            return out, probs.mean(dim=1)
        return out


# ---------------------------------------------------------------------------
# Fourier box features
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FourierSpec:
    num_bands: int = 8
    frequencies: tuple[float, ...] | None = None

    def freqs(self) -> tuple[float, ...]:
        if self.frequencies is not None:
            if len(self.frequencies) != self.num_bands:
                raise ValueError("need one frequency per band")
            return tuple(self.frequencies)
        return tuple(float(2**j) for j in range(self.num_bands))

    @property
    def out_dim(self) -> int:
        return 4 * 2 * self.num_bands


def fourier_embed(box, spec: FourierSpec = FourierSpec()) -> torch.Tensor:
    """[..., 4] box coordinates in [0, 1] -> [..., 8B].

    Layout per coordinate c and band j: ``sin(f_j π c), cos(f_j π c)``.
    """
    box = torch.as_tensor(box)
    if not box.is_floating_point():
        box = box.to(torch.get_default_dtype())
    if box.shape[-1] != 4:
        raise ValueError(f"expected 4 coordinates, got shape {tuple(box.shape)}")
    if (box < 0).any() or (box > 1).any() or torch.isnan(box).any():
        raise ValueError("box coordinates must lie in [0, 1]")
    f = torch.tensor(spec.freqs(), dtype=box.dtype) * math.pi
    arg = box.unsqueeze(-1) * f  # [..., 4, B]
    out = torch.stack([torch.sin(arg), torch.cos(arg)], dim=-1)  # [..., 4, B, 2]
    return out.flatten(-3)


class MLP(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, hidden: int | None = None, depth: int = 2):
        super().__init__()
        hidden = 4 * out_dim if hidden is None else hidden
        dims = [in_dim] + [hidden] * (depth - 1) + [out_dim]
        layers: list[nn.Module] = []
        for i in range(depth):
            layers.append(nn.Linear(dims[i], dims[i + 1]))
            if i < depth - 1:
                layers.append(nn.SiLU())
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


# ---------------------------------------------------------------------------
# CBAM
# ---------------------------------------------------------------------------


class CBAM(nn.Module):
    """Channel gate (shared MLP over avg/max pools) then spatial gate (k×k conv)."""

    def __init__(self, channels: int, reduction: int = 4, kernel_size: int = 7):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.channels = channels
        self.mlp = nn.Sequential(nn.Linear(channels, hidden), nn.SiLU(), nn.Linear(hidden, channels))
        self.spatial = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def gates(self, x: torch.Tensor):
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        if x.shape[1] != self.channels:
            raise ValueError(f"CBAM built for {self.channels} channels, got {x.shape[1]}")
        logits = self.mlp(x.mean(dim=(2, 3))) + self.mlp(x.amax(dim=(2, 3)))
        channel_gate = torch.sigmoid(logits)[:, :, None, None]
        y = x * channel_gate
        pooled = torch.cat([y.mean(dim=1, keepdim=True), y.amax(dim=1, keepdim=True)], dim=1)
        spatial_gate = torch.sigmoid(self.spatial(pooled))
        if squeeze:
            return channel_gate[0], spatial_gate[0]
        return channel_gate, spatial_gate

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        channel_gate, spatial_gate = self.gates(x)
        return x * channel_gate * spatial_gate


def cbam_forward(x: torch.Tensor, block: CBAM) -> torch.Tensor:
    return block(x)


# ---------------------------------------------------------------------------
# finite-difference gradient check
# ---------------------------------------------------------------------------


def _coords(numel: int, max_coords: int | None, generator: torch.Generator | None):
    if max_coords is None or numel <= max_coords:
        return range(numel)
    return torch.randperm(numel, generator=generator)[:max_coords].tolist()


def _max_rel_error(fn, inputs, eps, max_coords, generator) -> float:
    out = fn()
    if out.numel() != 1:
        out = out.sum()
    analytic = torch.autograd.grad(out, inputs, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for tensor, grad in zip(inputs, analytic):
            flat = tensor.view(-1)
            gflat = torch.zeros_like(flat) if grad is None else grad.reshape(-1)
            for i in _coords(flat.numel(), max_coords, generator):
                orig = flat[i].item()
                flat[i] = orig + eps
                plus = fn().sum().item()
                flat[i] = orig - eps
                minus = fn().sum().item()
                flat[i] = orig
                numeric = (plus - minus) / (2 * eps)
                err = abs(gflat[i].item() - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
    return worst


def grad_check(
    fn: Callable[[], torch.Tensor],
    inputs: Sequence[torch.Tensor],
    eps: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences.

    ``fn`` is re-evaluated with each input coordinate perturbed in place;
    non-scalar outputs are summed.  The error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``.  ``max_coords`` samples a
    random subset of coordinates per input tensor for large parameter sets.

    An error above 1e-2 is re-measured at 10x and 0.1x ``eps``; if it stays
    above 1e-2 the point is flagged with a :class:`GradCheckWarning`.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError("eps must lie in [1e-7, 1e-4]")
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != torch.float64:
            raise TypeError("grad_check requires float64 tensors")
        if not t.requires_grad:
            raise ValueError("every checked input must require grad")
    gen = torch.Generator().manual_seed(seed)
    err = _max_rel_error(fn, inputs, eps, max_coords, gen)
    if err > 1e-2:
        retries = []
        for alt in (eps * 10, eps / 10):
            alt = min(max(alt, 1e-7), 1e-4)
            gen = torch.Generator().manual_seed(seed)
            retries.append(_max_rel_error(fn, inputs, alt, max_coords, gen))
        if min(retries) > 1e-2:
            warnings.warn(
                f"gradient mismatch persists across step sizes (rel. err {err:.3g}); "
                "the op is non-differentiable here or its backward is wrong",
                GradCheckWarning,
                stacklevel=2,
            )
    return err


def conv_out_zero_(layer: nn.Module) -> nn.Module:
    for p in layer.parameters():
        nn.init.zeros_(p)
    return layer


__all__ = [
    "NEG_INF", "NonFiniteError", "GradCheckWarning", "check_finite", "softmax", "masked_softmax",
    "additive_mask", "attention_probs", "scaled_dot_attention", "AttentionConfig", "Attention",
    "FourierSpec", "fourier_embed", "MLP", "CBAM", "cbam_forward", "grad_check", "conv_out_zero_",
]
