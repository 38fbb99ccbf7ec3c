"""Directional ablation study: baseline vs full controller vs EA / inhibition-loss ablations.

Every stage is cached under one directory keyed by the resolved config, so a
rerun with the same config reuses checkpoints and metric files.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from pathlib import Path

import torch

from .bench.run import SamplerSettings, default_benchmark, read_metrics_csv, run_bench, write_metrics_csv
from .config import RunConfig
from .diffusion.checkpoint import load_checkpoint, save_checkpoint
from .diffusion.data import build_corpus
from .diffusion.schedule import NoiseSchedule
from .diffusion.train import TrainConfig, train_backbone, train_migc
from .diffusion.unet import UNetLite

log = logging.getLogger(__name__)

# variant -> (ablation name, lambda override)
VARIANTS = {"full": (None, None), "ea": ("ea", None), "loss": ("loss", 0.0)}


def study_config() -> RunConfig:
    """Desk-scale settings used for the directional reproduction."""
    cfg = RunConfig()
    cfg.train.n_images = 5000
    cfg.train.backbone_epochs = 30
    cfg.train.backbone_lr = 1e-3
    cfg.train.epochs = 10
    cfg.train.lr = 1e-3
    return cfg


def _key(cfg: RunConfig) -> str:
    return hashlib.sha256(cfg.to_ini().encode()).hexdigest()[:16]


def _prepare_cache(cache_dir, cfg: RunConfig) -> Path:
    cache = Path(cache_dir)
    cache.mkdir(parents=True, exist_ok=True)
    key_file = cache / "config_key.txt"
    key = _key(cfg)
    if key_file.exists() and key_file.read_text().strip() != key:
        for p in cache.glob("*.npz"):
            p.unlink()
        for p in cache.glob("*.csv"):
            p.unlink()
    key_file.write_text(key + "\n")
    cfg.save(cache / "config.ini")
    return cache


def _write_curve(curve, path):
    Path(path).write_text(json.dumps(curve, indent=1))


def ensure_backbone(cfg: RunConfig, cache: Path, corpus=None):
    path = cache / "backbone.npz"
    if path.exists():
        return path
    corpus = corpus or build_corpus(cfg.train.n_images, cfg.model.resolution, cfg.train.seed)
    torch.manual_seed(cfg.train.seed)
    model = UNetLite(cfg.model)
    schedule = NoiseSchedule(cfg.model.T, cfg.model.beta_start, cfg.model.beta_end)
    t0 = time.time()
    curve = train_backbone(model, corpus, cfg.train, schedule)
    log.info("backbone trained in %.0fs", time.time() - t0)
    _write_curve(curve, cache / "backbone_curve.json")
    save_checkpoint(path, model, schedule, stage="backbone")
    return path


def ensure_variant(cfg: RunConfig, cache: Path, variant: str, corpus=None):
    path = cache / f"migc_{variant}.npz"
    if path.exists():
        return path
    ablation, lam = VARIANTS[variant]
    backbone = ensure_backbone(cfg, cache, corpus)
    corpus = corpus or build_corpus(cfg.train.n_images, cfg.model.resolution, cfg.train.seed)
    tc = TrainConfig(**cfg.train.as_dict())
    if lam is not None:
        tc.lam = lam
    model, schedule, _ = load_checkpoint(backbone, ablation, backbone_only=True)
    t0 = time.time()
    curve = train_migc(model, corpus, tc, schedule)
    log.info("variant %s trained in %.0fs", variant, time.time() - t0)
    _write_curve(curve, cache / f"migc_{variant}_curve.json")
    save_checkpoint(path, model, schedule, stage="migc", ablation_name=ablation, extra={"train": tc.as_dict()})
    return path


def run_study(cache_dir, cfg: RunConfig | None = None, workers: int = 1,
              variants=("baseline", "full", "ea", "loss")) -> dict[str, list[dict]]:
    """Metric rows per variant; ``baseline`` is the full checkpoint sampled without MIGC."""
    cfg = cfg or study_config()
    cache = _prepare_cache(cache_dir, cfg)
    layouts = default_benchmark(cfg.bench)
    corpus = None
    out = {}
    for v in variants:
        metrics = cache / f"metrics_{v}.csv"
        if metrics.exists():
            out[v] = read_metrics_csv(metrics)
            continue
        needs_training = not (cache / f"migc_{'full' if v == 'baseline' else v}.npz").exists()
        if needs_training and corpus is None:
            corpus = build_corpus(cfg.train.n_images, cfg.model.resolution, cfg.train.seed)
        ckpt = ensure_variant(cfg, cache, "full" if v == "baseline" else v, corpus)
        t0 = time.time()
        _, rows = run_bench(ckpt, layouts, cfg.bench, SamplerSettings(use_migc=v != "baseline"),
                            workers=workers, out_dir=cache / f"bench_{v}", save_images=False)
        log.info("benchmark %s scored in %.0fs", v, time.time() - t0)
        write_metrics_csv(rows, metrics)
        out[v] = read_metrics_csv(metrics)
    return out


def row(rows: list[dict], level) -> dict:
    for r in rows:
        if r["level"] == level:
            return r
    raise KeyError(level)


def directional_checks(results: dict[str, list[dict]]) -> dict[str, tuple[bool, str]]:
    base = row(results["baseline"], "all")["instance_success_rate"]
    full = row(results["full"], "all")["instance_success_rate"]
    ea = row(results["ea"], "all")["instance_success_rate"]
    full_l4 = row(results["full"], 4)["miou"]
    loss_l4 = row(results["loss"], 4)["miou"]
    return {
        "7a": (full >= 1.5 * base and full > 0, f"ISR full={full:.4f} vs baseline={base:.4f} (need >= 1.5x)"),
        "7b": (ea < full, f"ISR without EA={ea:.4f} vs full={full:.4f}"),
        "7c": (loss_l4 < full_l4, f"L4 mIoU lambda=0: {loss_l4:.4f} vs lambda=0.1: {full_l4:.4f}"),
    }
