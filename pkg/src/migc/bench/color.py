"""HSV conversion and the versioned per-color HSV range table."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Render colors, chosen well inside their HSV ranges.
CANONICAL_RGB = {
    "red": (0.85, 0.10, 0.10),
    "yellow": (0.95, 0.85, 0.10),
    "green": (0.10, 0.70, 0.20),
    "blue": (0.15, 0.30, 0.90),
    "white": (0.95, 0.95, 0.95),
    "black": (0.05, 0.05, 0.05),
    "brown": (0.55, 0.30, 0.10),
}
BACKGROUND_RGB = (0.5, 0.5, 0.5)


def rgb_to_hsv(rgb) -> np.ndarray:
    """[..., 3] RGB in [0, 1] -> [..., 3] (hue degrees in [0, 360), s, v)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    delta = v - mn
    s = np.where(v > 0, delta / np.where(v > 0, v, 1), 0.0)
    safe = np.where(delta > 0, delta, 1)
    h = np.where(
        v == r, ((g - b) / safe) % 6,
        np.where(v == g, (b - r) / safe + 2, (r - g) / safe + 4),
    )
    h = np.where(delta > 0, h * 60.0, 0.0) % 360.0
    return np.stack([h, s, v], axis=-1)


@dataclass(frozen=True)
class ColorRange:
    hue: tuple[tuple[float, float], ...] | None = None  # half-open degree intervals
    sat: tuple[float, float] = (0.0, 1.0)  # closed-open, upper bound inclusive at 1
    val: tuple[float, float] = (0.0, 1.0)

    def contains(self, hsv: np.ndarray) -> np.ndarray:
        h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
        ok = _within(s, self.sat) & _within(v, self.val)
        if self.hue is not None:
            ok &= np.logical_or.reduce([(h >= lo) & (h < hi) for lo, hi in self.hue])
        return ok


def _within(x, bounds):
    lo, hi = bounds
    return (x >= lo) & ((x < hi) | (hi >= 1.0))


_CHROMA = dict(sat=(0.4, 1.0), val=(0.3, 1.0))


def default_ranges() -> dict[str, ColorRange]:
    return {
        "red": ColorRange(hue=((0.0, 15.0), (345.0, 360.0)), **_CHROMA),
        "yellow": ColorRange(hue=((45.0, 70.0),), **_CHROMA),
        "green": ColorRange(hue=((90.0, 150.0),), **_CHROMA),
        "blue": ColorRange(hue=((200.0, 260.0),), **_CHROMA),
        "brown": ColorRange(hue=((10.0, 40.0),), sat=(0.3, 1.0), val=(0.2, 0.7)),
        "white": ColorRange(sat=(0.0, 0.2), val=(0.85, 1.0)),
        "black": ColorRange(val=(0.0, 0.15)),
    }


@dataclass(frozen=True)
class ColorRangeTable:
    version: str = "hsv-v1"
    ranges: dict = field(default_factory=default_ranges)

    def mask(self, image: np.ndarray, color: str) -> np.ndarray:
        """Boolean [H, W] map of pixels inside ``color``'s range."""
        if color not in self.ranges:
            raise KeyError(f"no HSV range for color {color!r}")
        return self.ranges[color].contains(rgb_to_hsv(image))

    def as_dict(self) -> dict:
        out = {"version": self.version}
        for name, r in self.ranges.items():
            out[name] = {"hue": r.hue, "sat": r.sat, "val": r.val}
        return out
