"""Boxes, mask rasterization, background / layout-attention masks and IoU."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import torch


@dataclass(frozen=True)
class BoundingBox:
    """Normalized ``[x1, y1, x2, y2]``; ``[0, 0, 0, 0]`` is the null padding box."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if any(c != c for c in coords):
            raise ValueError("box coordinates must not be NaN")
        if self.is_sentinel:
            return
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"inverted or zero-area box {coords}")

    @classmethod
    def coerce(cls, box) -> "BoundingBox":
        if isinstance(box, BoundingBox):
            return box
        x1, y1, x2, y2 = (float(v) for v in box)
        return cls(x1, y1, x2, y2)

    @classmethod
    def null(cls) -> "BoundingBox":
        return cls(0.0, 0.0, 0.0, 0.0)

    @property
    def is_sentinel(self) -> bool:
        return self.x1 == self.y1 == self.x2 == self.y2 == 0.0

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def check_normalized(self) -> "BoundingBox":
        if not all(0.0 <= c <= 1.0 for c in self.as_list()):
            raise ValueError(f"box {self.as_list()} is not normalized to [0, 1]")
        return self


def rasterize_mask(box, H: int, W: int, ensure_nonempty: bool = True,
                   dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Binary [H, W] mask: pixel (r, c) is 1 iff its centre lies in [x1,x2)×[y1,y2).

    A box too thin to contain any pixel centre lights the single pixel holding
    the box centre when ``ensure_nonempty`` is set, so every real instance owns
    at least one feature pixel.  The null box gives an all-zero mask.
    """
    box = BoundingBox.coerce(box)
    if H < 1 or W < 1:
        raise ValueError("grid must be at least 1x1")
    if box.is_sentinel:
        return torch.zeros(H, W, dtype=dtype)
    return rasterize_boxes(torch.tensor([box.as_list()], dtype=torch.float64), H, W,
                           ensure_nonempty=ensure_nonempty, dtype=dtype)[0]


def rasterize_boxes(boxes: torch.Tensor, H: int, W: int, ensure_nonempty: bool = True,
                    dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Vectorised :func:`rasterize_mask` for a [..., 4] tensor of boxes."""
    boxes = boxes.to(torch.float64)
    x1, y1, x2, y2 = boxes.unbind(-1)
    cx = (torch.arange(W, dtype=torch.float64) + 0.5) / W
    cy = (torch.arange(H, dtype=torch.float64) + 0.5) / H
    inx = (cx >= x1[..., None]) & (cx < x2[..., None])  # [..., W]
    iny = (cy >= y1[..., None]) & (cy < y2[..., None])  # [..., H]
    mask = iny[..., :, None] & inx[..., None, :]
    sentinel = (boxes == 0).all(-1)
    if ensure_nonempty:
        empty = ~mask.flatten(-2).any(-1) & ~sentinel
        if empty.any():
            col = ((x1 + x2) / 2 * W).floor().clamp(0, W - 1).long()
            row = ((y1 + y2) / 2 * H).floor().clamp(0, H - 1).long()
            onehot = (torch.arange(H)[:, None] == row[..., None, None]) & (
                torch.arange(W)[None, :] == col[..., None, None])
            fix = onehot & empty[..., None, None]
            mask = mask | fix
    mask = mask & ~sentinel[..., None, None]
    return mask.to(dtype)


def background_mask(masks: Sequence[torch.Tensor] | torch.Tensor, shape: tuple[int, int] | None = None) -> torch.Tensor:
    """1 - elementwise max over instance masks; all ones when there are none."""
    if isinstance(masks, torch.Tensor):
        stack = masks
    else:
        masks = list(masks)
        if not masks:
            if shape is None:
                raise ValueError("need a grid shape when there are no instance masks")
            return torch.ones(shape)
        shapes = {tuple(m.shape) for m in masks}
        if len(shapes) != 1:
            raise ValueError(f"instance masks disagree on resolution: {sorted(shapes)}")
        stack = torch.stack(masks)
    if stack.shape[0] == 0:
        return torch.ones(stack.shape[1:], dtype=stack.dtype)
    return 1 - stack.amax(dim=0)


@dataclass
class MaskSet:
    """Instance masks [N, H, W] with their background and all-ones layout masks."""

    instances: torch.Tensor
    background: torch.Tensor
    layout: torch.Tensor

    @classmethod
    def from_boxes(cls, boxes: Iterable, H: int, W: int, dtype=torch.float32) -> "MaskSet":
        boxes = [BoundingBox.coerce(b) for b in boxes]
        if boxes:
            inst = torch.stack([rasterize_mask(b, H, W, dtype=dtype) for b in boxes])
        else:
            inst = torch.zeros(0, H, W, dtype=dtype)
        bg = background_mask(inst) if len(boxes) else torch.ones(H, W, dtype=dtype)
        return cls(inst, bg, torch.ones(H, W, dtype=dtype))

    @property
    def layout_members(self) -> torch.Tensor:
        """Masks used to build the layout-attention mask: background first."""
        return torch.cat([self.background[None], self.instances])


def build_layout_attention_mask(members: torch.Tensor) -> torch.Tensor:
    """Pass/ban predicate over pixel pairs from region masks.

    members: [..., K, H, W] binary masks (background plus instances).
    Returns bool [..., H*W, H*W]; entry (p, q) passes iff some mask contains both.
    """
    if members.dim() < 3:
        raise ValueError("expected [..., K, H, W] region masks")
    flat = members.flatten(-2).to(torch.float32)  # [..., K, HW]
    shared = flat.transpose(-1, -2) @ flat  # [..., HW, HW] counts of shared masks
    return shared > 0


def iou(a, b) -> float:
    """Exact intersection-over-union of two boxes (any consistent units)."""
    ax1, ay1, ax2, ay2 = (float(v) for v in (a.as_list() if isinstance(a, BoundingBox) else a))
    bx1, by1, bx2, by2 = (float(v) for v in (b.as_list() if isinstance(b, BoundingBox) else b))
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union <= 0:
        return 0.0
    return inter / union
