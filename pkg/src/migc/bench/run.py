"""Benchmark driver: manifest I/O, chunked generation over a worker pool, metric files."""

from __future__ import annotations

import csv
import json
import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .color import ColorRangeTable
from .evaluate import EvalConfig, InstanceVerdict, evaluate_image, metrics_by_level
from .layouts import BenchmarkSpec, build_benchmark
from .render import Layout, render_ground_truth

METRIC_COLUMNS = ("level", "n_images", "instance_success_rate", "miou", "R")


class OracleClosureError(RuntimeError):
    """The evaluator fails on its own ground truth; generated-image scores would be meaningless."""


@dataclass
class BenchConfig:
    spec: BenchmarkSpec = field(default_factory=BenchmarkSpec)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0  # layout sampling
    seed_base: int = 0  # image seeds are seed_base + 0..seeds_per_layout-1
    chunk_size: int = 8
    resolution: int = 32


# -- manifests -------------------------------------------------------------


def write_manifest(layouts: list[Layout], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for l in layouts:
            fh.write(json.dumps(l.as_dict(), sort_keys=True) + "\n")
    return path


def read_manifest(path) -> list[Layout]:
    with open(path) as fh:
        return [Layout.from_dict(json.loads(line)) for line in fh if line.strip()]


def write_verdicts(records: list[InstanceVerdict], path) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.as_dict(), sort_keys=True) + "\n")
    return path


def write_metrics_csv(rows: list[dict], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r["level"], r["n_images"]] + [f"{r[k]:.6f}" for k in METRIC_COLUMNS[2:]])
    return path


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        lvl = r["level"]
        out.append({"level": int(lvl) if lvl.isdigit() else lvl, "n_images": int(r["n_images"]),
                    **{k: float(r[k]) for k in METRIC_COLUMNS[2:]}})
    return out


def delta_table(baseline: list[dict], treated: list[dict]) -> list[dict]:
    """Per-level ``treated - baseline`` for every metric column."""
    base = {r["level"]: r for r in baseline}
    out = []
    for r in treated:
        b = base.get(r["level"])
        if b is None:
            continue
        out.append({"level": r["level"], **{k: r[k] - b[k] for k in METRIC_COLUMNS[2:]}})
    return out


def image_name(layout: Layout, seed: int) -> str:
    return f"{layout.layout_id}_s{seed}.png"


def save_png(image_u8: np.ndarray, path) -> None:
    Image.fromarray(np.ascontiguousarray(image_u8, dtype=np.uint8)).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


# -- oracle closure ----------------------------------------------------------


def gt_selfcheck(layouts: list[Layout], config: BenchConfig = BenchConfig(),
                 ranges: ColorRangeTable = ColorRangeTable()) -> list[dict]:
    """Evaluate ground-truth renders; raise :class:`OracleClosureError` unless closure holds."""
    records = []
    for l in layouts:
        img, _ = render_ground_truth(l, config.resolution)
        img = np.round(img * 255).astype(np.uint8) / 255.0
        records += evaluate_image(img, l, 0, ranges, config.eval)
    rows = metrics_by_level(records)
    agg = rows[-1]
    if agg["instance_success_rate"] != 1.0 or agg["miou"] < 0.95:
        raise OracleClosureError(
            f"ground-truth renders score ISR={agg['instance_success_rate']:.4f}, mIoU={agg['miou']:.4f}")
    return rows


# -- generation -----------------------------------------------------------------


@contextmanager
def single_thread():
    old = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(old)


@dataclass
class SamplerSettings:
    steps: int | None = None
    cfg_scale: float | None = None
    migc_steps: int | None = None
    use_migc: bool = True
    uncond_migc: bool = False


def work_items(layouts: list[Layout], seeds_per_layout: int, seed_base: int = 0) -> list[tuple[int, int]]:
    return [(i, seed_base + s) for i in range(len(layouts)) for s in range(seeds_per_layout)]


def chunked(items: list, size: int) -> list[list]:
    if size < 1:
        raise ValueError("chunk size must be positive")
    return [items[i:i + size] for i in range(0, len(items), size)]


_WORKER: dict = {}


def _init_worker(checkpoint, ablation):
    from ..diffusion.checkpoint import load_checkpoint

    torch.set_num_threads(1)
    model, schedule, _ = load_checkpoint(checkpoint, ablation)
    model.eval()
    _WORKER["model"], _WORKER["schedule"] = model, schedule


def generate_chunk(model, schedule, layouts: list[Layout], chunk, settings: SamplerSettings,
                   config: BenchConfig, ranges: ColorRangeTable):
    """Generate and score one fixed-size chunk of ``(layout index, seed)`` items."""
    from ..diffusion.sample import GenerationRequest, sample, to_uint8

    cfg = model.config
    reqs = []
    for li, seed in chunk:
        l = layouts[li]
        descs = [(x.color, x.shape) for x in l.instances]
        reqs.append(GenerationRequest(
            descs, descs, [x.box for x in l.instances], seed=seed,
            steps=settings.steps or cfg.sample_steps,
            cfg_scale=cfg.cfg_scale if settings.cfg_scale is None else settings.cfg_scale,
            migc_steps=cfg.migc_steps if settings.migc_steps is None else settings.migc_steps,
            use_migc=settings.use_migc,
        ))
    imgs = to_uint8(sample(model, reqs, schedule, uncond_migc=settings.uncond_migc))
    out = []
    for (li, seed), img in zip(chunk, imgs):
        verdicts = evaluate_image(img / 255.0, layouts[li], seed, ranges, config.eval)
        out.append((li, seed, img, verdicts))
    return out


def _pool_chunk(args):
    layouts, chunk, settings, config, ranges = args
    return generate_chunk(_WORKER["model"], _WORKER["schedule"], layouts, chunk, settings, config, ranges)


def run_bench(checkpoint, layouts: list[Layout], config: BenchConfig = BenchConfig(),
              settings: SamplerSettings = SamplerSettings(), workers: int = 1, out_dir=None,
              ranges: ColorRangeTable = ColorRangeTable(), ablation: str | None = "__stored__",
              save_images: bool = True, progress=None):
    """Generate every ``(layout, seed)`` image and evaluate it.

    Work is cut into ``config.chunk_size`` chunks independent of ``workers``
    and reduced in item order, so metrics do not depend on the worker count.
    Returns ``(records, metric rows)``.
    """
    items = work_items(layouts, config.spec.seeds_per_layout, config.seed_base)
    chunks = chunked(items, config.chunk_size)
    results = []
    if workers <= 1:
        from ..diffusion.checkpoint import load_checkpoint

        with single_thread():
            model, schedule, _ = load_checkpoint(checkpoint, ablation)
            model.eval()
            for k, ch in enumerate(chunks):
                results.append(generate_chunk(model, schedule, layouts, ch, settings, config, ranges))
                if progress:
                    progress(k + 1, len(chunks))
    else:
        ctx = mp.get_context("spawn")
        with ProcessPoolExecutor(workers, mp_context=ctx, initializer=_init_worker,
                                 initargs=(str(checkpoint), ablation)) as ex:
            args = [(layouts, ch, settings, config, ranges) for ch in chunks]
            for k, res in enumerate(ex.map(_pool_chunk, args)):
                results.append(res)
                if progress:
                    progress(k + 1, len(chunks))
    records = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "images").mkdir(parents=True, exist_ok=True)
    for res in results:
        for li, seed, img, verdicts in res:
            records += verdicts
            if out is not None and save_images:
                save_png(img, out / "images" / image_name(layouts[li], seed))
    rows = metrics_by_level(records)
    if out is not None:
        write_verdicts(records, out / "verdicts.jsonl")
        write_metrics_csv(rows, out / "metrics.csv")
    return records, rows


def evaluate_directory(image_dir, layouts: list[Layout], seeds, config: BenchConfig = BenchConfig(),
                       ranges: ColorRangeTable = ColorRangeTable()):
    """Score existing PNGs named ``<layout_id>_s<seed>.png`` against a manifest."""
    image_dir = Path(image_dir)
    records = []
    for l in layouts:
        for seed in seeds:
            p = image_dir / image_name(l, seed)
            if not p.exists():
                raise FileNotFoundError(f"missing image {p}")
            records += evaluate_image(load_png(p) / 255.0, l, seed, ranges, config.eval)
    return records, metrics_by_level(records)


def default_benchmark(config: BenchConfig = BenchConfig()) -> list[Layout]:
    return build_benchmark(config.spec, config.seed)
