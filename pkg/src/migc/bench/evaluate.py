"""Position / attribute verdicts and the benchmark metrics."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass

import numpy as np

from ..layout import iou
from .color import ColorRangeTable
from .detect import Detection, detect_instances
from .render import Layout


@dataclass
class EvalConfig:
    iou_threshold: float = 0.5
    color_threshold: float = 0.2
    select: str = "max_iou"  # or "closest"
    match_shape: bool = True
    fill_tol: float = 0.12

    def __post_init__(self):
        if not 0 < self.iou_threshold < 1:
            raise ValueError("iou_threshold must lie in (0, 1)")
        if not 0 < self.color_threshold <= 1:
            raise ValueError("color_threshold must lie in (0, 1]")
        if self.select not in ("max_iou", "closest"):
            raise ValueError("select must be 'max_iou' or 'closest'")


def _center(b):
    return ((b[0] + b[2]) / 2, (b[1] + b[3]) / 2)


def position_eval(detections: list[Detection], gt_box, t: float = 0.5, select: str = "max_iou"):
    """``(position_correct, best_iou, chosen_detection)``."""
    if not 0 < t < 1:
        raise ValueError("t must lie in (0, 1)")
    if not detections:
        return False, 0.0, None
    if select == "closest":
        cx, cy = _center(gt_box)
        chosen = min(detections, key=lambda d: (_center(d.box)[0] - cx) ** 2 + (_center(d.box)[1] - cy) ** 2)
    else:
        chosen = max(detections, key=lambda d: iou(d.box, gt_box))
    best = iou(chosen.box, gt_box)
    return best >= t, best, chosen


def attribute_eval(image, region_mask, color: str, ranges: ColorRangeTable = ColorRangeTable(), S: float = 0.2):
    """``(passes, fraction)`` of region pixels inside the color's HSV range."""
    region_mask = np.asarray(region_mask, dtype=bool)
    total = int(region_mask.sum())
    if total == 0:
        return False, 0.0
    frac = float(ranges.mask(image, color)[region_mask].sum()) / total
    return frac >= S, frac


@dataclass
class InstanceVerdict:
    layout_id: str
    level: int
    seed: int
    index: int
    color: str
    shape: str
    best_iou: float
    position_correct: bool
    color_correct: bool
    fully_correct: bool

    @property
    def miou_value(self) -> float:
        return self.best_iou if self.color_correct else 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate_image(image, layout: Layout, seed: int = 0, ranges: ColorRangeTable = ColorRangeTable(),
                   config: EvalConfig = EvalConfig()) -> list[InstanceVerdict]:
    out = []
    for i, inst in enumerate(layout.instances):
        dets = detect_instances(image, (inst.color, inst.shape), ranges,
                                match_shape=config.match_shape, fill_tol=config.fill_tol)
        pos_ok, best, chosen = position_eval(dets, inst.box, config.iou_threshold, config.select)
        color_ok = False
        if chosen is not None:
            color_ok, _ = attribute_eval(image, chosen.mask, inst.color, ranges, config.color_threshold)
        out.append(InstanceVerdict(layout.layout_id, layout.level, seed, i, inst.color, inst.shape, best,
                                   pos_ok, color_ok, pos_ok and color_ok))
    return out


def compute_metrics(records) -> dict[str, float]:
    """Instance success rate, mIoU (zeroed on wrong color) and the all-positions-correct image rate."""
    records = list(records)
    if not records:
        raise ValueError("no evaluation records")
    isr = sum(r.fully_correct for r in records) / len(records)
    miou = sum(r.miou_value for r in records) / len(records)
    images = defaultdict(list)
    for r in records:
        images[(r.layout_id, r.seed)].append(r.position_correct)
    rate = sum(all(v) for v in images.values()) / len(images)
    return {"n_images": len(images), "instance_success_rate": isr, "miou": miou, "R": rate}


def metrics_by_level(records) -> list[dict]:
    """One row per level, sorted, plus a final ``all`` row."""
    records = list(records)
    by_level = defaultdict(list)
    for r in records:
        by_level[r.level].append(r)
    rows = [{"level": lvl, **compute_metrics(rs)} for lvl, rs in sorted(by_level.items())]
    rows.append({"level": "all", **compute_metrics(records)})
    return rows
