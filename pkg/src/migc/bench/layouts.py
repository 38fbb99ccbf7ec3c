"""Synthetic multi-instance benchmark construction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..diffusion.vocab import COLORS, SHAPES
from ..layout import iou
from .render import Instance, Layout


class InfeasibleLayoutError(RuntimeError):
    pass


@dataclass
class BenchmarkSpec:
    levels: tuple[int, ...] = (2, 3, 4)
    layouts_per_level: int = 50
    seeds_per_layout: int = 4
    palette: tuple[str, ...] = COLORS
    shapes: tuple[str, ...] = SHAPES
    min_side: float = 1 / 8
    max_side: float = 0.5
    grid: int = 32  # box coordinates are multiples of 1/grid
    max_pair_iou: float = 0.0  # 0 means disjoint boxes separated by `gap` cells
    gap: int = 1
    extra_source_instances: int = 2
    max_tries: int = 2000

    def __post_init__(self):
        self.levels = tuple(int(l) for l in self.levels)
        self.palette = tuple(self.palette)
        self.shapes = tuple(self.shapes)
        if self.layouts_per_level <= 0:
            raise ValueError("layouts_per_level must be positive")
        if not self.palette:
            raise ValueError("palette must not be empty")
        if any(l < 1 for l in self.levels):
            raise ValueError("levels must be positive instance counts")
        if not 0 < self.min_side <= self.max_side <= 1:
            raise ValueError("need 0 < min_side <= max_side <= 1")


def _compatible(a, b, spec: BenchmarkSpec) -> bool:
    if spec.max_pair_iou > 0:
        return iou(a, b) <= spec.max_pair_iou
    g = spec.gap / spec.grid
    return a[2] + g <= b[0] or b[2] + g <= a[0] or a[3] + g <= b[1] or b[3] + g <= a[1]


def sample_boxes(n: int, spec: BenchmarkSpec, rng: np.random.Generator) -> list[tuple[float, ...]]:
    """Rejection-sample ``n`` grid-aligned boxes meeting the side and overlap rules."""
    lo = int(np.ceil(spec.min_side * spec.grid - 1e-9))
    hi = max(lo, int(np.floor(spec.max_side * spec.grid + 1e-9)))
    for _ in range(spec.max_tries):
        boxes: list[tuple[float, ...]] = []
        for _ in range(50 * n):
            w, h = rng.integers(lo, hi + 1, size=2)
            x, y = rng.integers(0, spec.grid - w + 1), rng.integers(0, spec.grid - h + 1)
            cand = (x / spec.grid, y / spec.grid, (x + w) / spec.grid, (y + h) / spec.grid)
            if all(_compatible(cand, b, spec) for b in boxes):
                boxes.append(cand)
                if len(boxes) == n:
                    return boxes
    raise InfeasibleLayoutError(f"could not place {n} boxes under {spec}")


def sample_layouts(spec: BenchmarkSpec, level: int, rng: np.random.Generator, n_layouts: int | None = None):
    """Layouts with exactly ``level`` boxes, keeping the largest boxes of a bigger source layout."""
    if not 1 <= level:
        raise ValueError("level must be a positive instance count")
    n_layouts = spec.layouts_per_level if n_layouts is None else n_layouts
    out = []
    for _ in range(n_layouts):
        n_src = level + int(rng.integers(0, spec.extra_source_instances + 1))
        while True:
            try:
                boxes = sample_boxes(n_src, spec, rng)
                break
            except InfeasibleLayoutError:
                if n_src == level:
                    raise
                n_src -= 1
        order = sorted(range(len(boxes)), key=lambda i: -(boxes[i][2] - boxes[i][0]) * (boxes[i][3] - boxes[i][1]))
        out.append([boxes[i] for i in sorted(order[:level])])
    return out


def assign_colors(boxes, palette, rng: np.random.Generator) -> list[str]:
    palette = list(palette)
    if not palette:
        raise ValueError("palette must not be empty")
    return [palette[int(i)] for i in rng.integers(0, len(palette), size=len(boxes))]


def assign_shapes(boxes, shapes, rng: np.random.Generator) -> list[str]:
    shapes = list(shapes)
    return [shapes[int(i)] for i in rng.integers(0, len(shapes), size=len(boxes))]


def build_prompt(instances) -> str:
    """'a red circle and a blue square and a ...'"""
    descs = [i.desc if isinstance(i, Instance) else (i if isinstance(i, str) else " ".join(i)) for i in instances]
    if not descs:
        raise ValueError("a prompt needs at least one instance")
    return " and ".join(f"a {d}" for d in descs)


def build_benchmark(spec: BenchmarkSpec, seed: int = 0) -> list[Layout]:
    rng = np.random.default_rng(seed)
    layouts = []
    for level in spec.levels:
        for j, boxes in enumerate(sample_layouts(spec, level, rng)):
            colors = assign_colors(boxes, spec.palette, rng)
            shapes = assign_shapes(boxes, spec.shapes, rng)
            inst = [Instance(c, s, b) for c, s, b in zip(colors, shapes, boxes)]
            layouts.append(Layout(inst, layout_id=f"L{level}_{j:04d}", level=level))
    return layouts


@dataclass
class CorpusSpec:
    """Training-corpus layouts: overlapping boxes allowed up to ``max_pair_iou``."""

    min_instances: int = 1
    max_instances: int = 4
    bench: BenchmarkSpec = field(default_factory=lambda: BenchmarkSpec(max_pair_iou=0.3))


def sample_training_layout(spec: CorpusSpec, rng: np.random.Generator) -> Layout:
    n = int(rng.integers(spec.min_instances, spec.max_instances + 1))
    boxes = sample_boxes(n, spec.bench, rng)
    colors = assign_colors(boxes, spec.bench.palette, rng)
    shapes = assign_shapes(boxes, spec.bench.shapes, rng)
    return Layout([Instance(c, s, b) for c, s, b in zip(colors, shapes, boxes)], level=n)
