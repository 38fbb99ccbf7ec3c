"""Shape templates and ground-truth rendering of colored layouts.

Every template touches all four sides of its pixel rectangle, so the tight
box of an unoccluded render is exactly the rasterized layout box.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..layout import BoundingBox
from .color import BACKGROUND_RGB, CANONICAL_RGB

CROSS_ARM = 0.25  # arm width as a fraction of the box side


def shape_template(shape: str, h: int, w: int) -> np.ndarray:
    """Boolean [h, w] pixel template of ``shape`` filling an h×w rectangle."""
    if h < 1 or w < 1:
        raise ValueError("template needs at least one pixel")
    v = (np.arange(h)[:, None] + 0.5) / h
    u = (np.arange(w)[None, :] + 0.5) / w
    if shape == "square":
        return np.ones((h, w), dtype=bool)
    if shape == "circle":
        t = (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25 + 1e-12
        # thin ellipses can miss the sides; keep the pixels holding the touch points
        du, dv = np.abs(u[0] - 0.5), np.abs(v[:, 0] - 0.5)
        cols, rows = du <= du.min() + 1e-12, dv <= dv.min() + 1e-12
        t[[0, -1]] |= cols
        t[:, [0, -1]] |= rows[:, None]
        return t
    if shape == "triangle":
        # right angle bottom-left; a pixel is in if its left edge is left of
        # the hypotenuse at the pixel's bottom edge
        left = np.arange(w)[None, :] / w
        bottom = (np.arange(h)[:, None] + 1) / h
        return left < bottom
    if shape == "cross":
        au = max(CROSS_ARM / 2, 0.5 / w)
        av = max(CROSS_ARM / 2, 0.5 / h)
        return (np.abs(u - 0.5) <= au + 1e-12) | (np.abs(v - 0.5) <= av + 1e-12)
    raise KeyError(f"unknown shape {shape!r}")


def box_pixels(box, H: int, W: int) -> tuple[int, int, int, int]:
    """Row/column span ``(r0, r1, c0, c1)`` of pixels whose centres lie in the box."""
    b = BoundingBox.coerce(box)
    c0 = int(np.ceil(b.x1 * W - 0.5))
    c1 = int(np.ceil(b.x2 * W - 0.5))
    r0 = int(np.ceil(b.y1 * H - 0.5))
    r1 = int(np.ceil(b.y2 * H - 0.5))
    return max(r0, 0), min(r1, H), max(c0, 0), min(c1, W)


@dataclass
class Instance:
    color: str
    shape: str
    box: tuple[float, float, float, float]

    @property
    def desc(self) -> str:
        return f"{self.color} {self.shape}"

    def as_dict(self) -> dict:
        return {"desc": self.desc, "color": self.color, "shape": self.shape, "box": list(self.box)}

    @classmethod
    def from_dict(cls, d: dict) -> "Instance":
        color, shape = d.get("color"), d.get("shape")
        if color is None or shape is None:
            color, shape = d["desc"].split()
        return cls(color, shape, tuple(float(v) for v in d["box"]))


@dataclass
class Layout:
    instances: list[Instance]
    layout_id: str = ""
    level: int = 0
    extras: dict = field(default_factory=dict)

    @property
    def prompt(self) -> str:
        from .layouts import build_prompt

        return build_prompt(self.instances)

    def as_dict(self) -> dict:
        return {"layout_id": self.layout_id, "level": self.level, "prompt": self.prompt,
                "instances": [i.as_dict() for i in self.instances]}

    @classmethod
    def from_dict(cls, d: dict) -> "Layout":
        return cls([Instance.from_dict(i) for i in d["instances"]], d.get("layout_id", ""), d.get("level", 0))


def render_ground_truth(layout: Layout, resolution: int = 32):
    """Draw instances in order over a gray canvas.

    Returns ``(image [H, W, 3] float in [0, 1], masks)`` where ``masks[i]`` is
    the visible region of instance ``i`` after later instances are drawn.
    """
    H = W = resolution
    image = np.empty((H, W, 3))
    image[:] = BACKGROUND_RGB
    owner = np.full((H, W), -1)
    for i, inst in enumerate(layout.instances):
        r0, r1, c0, c1 = box_pixels(inst.box, H, W)
        if r1 <= r0 or c1 <= c0:
            continue
        tmpl = shape_template(inst.shape, r1 - r0, c1 - c0)
        region = np.zeros((H, W), dtype=bool)
        region[r0:r1, c0:c1] = tmpl
        image[region] = CANONICAL_RGB[inst.color]
        owner[region] = i
    masks = [owner == i for i in range(len(layout.instances))]
    return image, masks
