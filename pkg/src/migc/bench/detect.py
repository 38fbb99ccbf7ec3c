"""Oracle instance detector: HSV color segmentation + 4-connected components."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .color import ColorRangeTable
from .render import shape_template

FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


@dataclass
class Detection:
    box: tuple[float, float, float, float]  # normalized
    mask: np.ndarray  # bool [H, W]
    fill: float
    shapes: tuple[str, ...]  # shapes consistent with the component


def min_area_pixels(H: int, W: int, min_side: float = 1 / 8) -> float:
    """Quarter of the smallest legal instance box."""
    return 0.25 * min_side**2 * H * W


def expected_fill(shape: str, h: int, w: int) -> float:
    return float(shape_template(shape, h, w).mean())


def classify_shape(component: np.ndarray, shapes, tol: float = 0.12) -> tuple[str, ...]:
    """Shapes whose rasterized fill ratio at this box size is nearest the component's.

    ``component`` is the boolean crop to the component's tight box.  Ties are
    all returned; nothing is returned when even the nearest signature is more
    than ``tol`` away.
    """
    h, w = component.shape
    fill = component.mean()
    dist = {s: abs(fill - expected_fill(s, h, w)) for s in shapes}
    best = min(dist.values())
    if best > tol:
        return ()
    return tuple(s for s in shapes if dist[s] <= best + 1e-9)


def detect_instances(image: np.ndarray, target, ranges: ColorRangeTable = ColorRangeTable(),
                     min_area: float | None = None, shapes=("circle", "square", "triangle", "cross"),
                     match_shape: bool = True, fill_tol: float = 0.12) -> list[Detection]:
    """Components of the target color, optionally filtered to the target shape.

    image: [H, W, 3] RGB in [0, 1]; target: ``(color, shape)``.
    """
    color, shape = target
    H, W = image.shape[:2]
    if min_area is None:
        min_area = min_area_pixels(H, W)
    hit = ranges.mask(image, color)
    labels, n = ndimage.label(hit, structure=FOUR_CONNECTED)
    dets = []
    for k, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        comp = labels == k
        area = int(comp.sum())
        if area < min_area:
            continue
        crop = comp[sl]
        found = classify_shape(crop, shapes, fill_tol)
        if match_shape and shape not in found:
            continue
        r, c = sl
        box = (c.start / W, r.start / H, c.stop / W, r.stop / H)
        dets.append(Detection(box, comp, float(crop.mean()), found))
    return dets
