"""Command-line entry points: train, generate, bench, eval, gradcheck.

Exit codes: 0 success, 1 usage/config error, 2 numerical abort,
3 oracle-closure failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import torch

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_ORACLE = 0, 1, 2, 3

log = logging.getLogger("migc")


class UsageError(Exception):
    pass


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def make_run_dir(root, command: str, name: str | None = None) -> Path:
    stamp = name or f"{time.strftime('%Y%m%d-%H%M%S')}-{command}"
    path = Path(root) / stamp
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_run_manifest(run_dir: Path, command: str, argv, inputs: dict) -> None:
    record = {
        "command": command,
        "argv": list(argv),
        "inputs": {k: {"path": str(p), "sha256": file_hash(p)} for k, p in inputs.items() if p is not None},
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (run_dir / "run_manifest.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _write_curve(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "L_LDM", "L_ihbt", "L_total"])
        for r in rows:
            w.writerow([r["epoch"], f"{r['L_LDM']:.8f}", f"{r['L_ihbt']:.8f}", f"{r['L_total']:.8f}"])


# -- train ---------------------------------------------------------------------


def cmd_train(args) -> int:
    from .config import RunConfig
    from .diffusion.checkpoint import load_checkpoint, save_checkpoint
    from .diffusion.data import build_corpus
    from .diffusion.schedule import NoiseSchedule
    from .diffusion.train import train_backbone, train_migc
    from .diffusion.unet import UNetLite
    from .core import Ablation

    cfg = RunConfig.load(args.config)
    if args.ablate == "loss":
        cfg.train.lam = 0.0
    ablation = Ablation.from_name(args.ablate)
    if not args.pretrain_backbone and not args.backbone:
        raise UsageError("no stage-0 backbone: pass --backbone CHECKPOINT or --pretrain-backbone")
    run = make_run_dir(args.out, "train", args.run_name)
    cfg.save(run / "config.ini")
    write_run_manifest(run, "train", sys.argv, {"config": args.config, "backbone": args.backbone})
    corpus = build_corpus(cfg.train.n_images, cfg.model.resolution, cfg.train.seed)
    if args.backbone:
        model, schedule, _ = load_checkpoint(args.backbone, args.ablate, backbone_only=True)
        if model.config.as_dict() != cfg.model.as_dict():
            raise UsageError("backbone checkpoint was trained with a different [model] section")
    else:
        torch.manual_seed(cfg.train.seed)
        model = UNetLite(cfg.model, ablation)
        schedule = NoiseSchedule(cfg.model.T, cfg.model.beta_start, cfg.model.beta_end)
        curve = train_backbone(model, corpus, cfg.train, schedule)
        _write_curve(curve, run / "backbone_loss.csv")
        save_checkpoint(run / "backbone.npz", model, schedule, stage="backbone")
    curve = train_migc(model, corpus, cfg.train, schedule)
    _write_curve(curve, run / "loss_curve.csv")
    save_checkpoint(run / "model.npz", model, schedule, stage="migc", ablation_name=args.ablate,
                    extra={"train": cfg.train.as_dict()})
    print(run)
    return EXIT_OK


# -- generate ---------------------------------------------------------------------


def parse_request(path) -> dict:
    """Validate a layout request file; returns plain fields."""
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read request {path}: {e}") from None
    if not isinstance(data, dict):
        raise UsageError("request must be a JSON object")
    allowed = {"prompt", "instances", "seed", "steps", "cfg_scale"}
    extra = set(data) - allowed
    if extra:
        raise UsageError(f"unknown request fields {sorted(extra)}")
    if not isinstance(data.get("prompt"), str) or not isinstance(data.get("instances"), list):
        raise UsageError("request needs a string 'prompt' and an 'instances' list")
    insts = []
    for i, inst in enumerate(data["instances"]):
        if not isinstance(inst, dict) or set(inst) - {"desc", "box", "color"} or "desc" not in inst or "box" not in inst:
            raise UsageError(f"instance {i} must have 'desc' and 'box' (optional 'color') only")
        box = inst["box"]
        if not (isinstance(box, list) and len(box) == 4 and all(isinstance(v, (int, float)) for v in box)):
            raise UsageError(f"instance {i}: box must be four numbers")
        if not all(0 <= v <= 1 for v in box) or box[0] > box[2] or box[1] > box[3]:
            raise UsageError(f"instance {i}: box must be normalized [x1, y1, x2, y2]")
        insts.append(inst)
    seeds = data.get("seed", 0)
    seeds = seeds if isinstance(seeds, list) else [seeds]
    return {"prompt": data["prompt"], "instances": insts, "seeds": [int(s) for s in seeds],
            "steps": data.get("steps"), "cfg_scale": data.get("cfg_scale")}


def cmd_generate(args) -> int:
    from .bench.run import save_png
    from .core import ChannelBudgetError
    from .diffusion.checkpoint import load_checkpoint
    from .diffusion.sample import GenerationRequest, sample, to_uint8

    req = parse_request(args.request)
    model, schedule, meta = load_checkpoint(args.checkpoint)
    model.eval()
    vocab = model.encoder.vocab
    try:
        prompt = vocab.parse_prompt(req["prompt"])
        descs = [tuple(vocab.parse_prompt(i["desc"])[0]) for i in req["instances"]]
    except KeyError as e:
        raise UsageError(f"request uses unknown tokens: {e}") from None
    if len(descs) > model.config.max_num:
        raise ChannelBudgetError(len(descs), model.config.max_num)
    cfg = model.config
    steps = args.steps or req["steps"] or cfg.sample_steps
    scale = args.cfg_scale if args.cfg_scale is not None else (req["cfg_scale"] or cfg.cfg_scale)
    migc_steps = cfg.migc_steps if cfg.migc_steps is None or cfg.migc_steps <= steps else steps
    seeds = args.seed if args.seed else req["seeds"]
    run = make_run_dir(args.out, "generate", args.run_name)
    write_run_manifest(run, "generate", sys.argv, {"request": args.request, "checkpoint": args.checkpoint})
    reqs = [GenerationRequest(prompt, descs, [i["box"] for i in req["instances"]], seed=s, steps=steps,
                              cfg_scale=scale, migc_steps=migc_steps, use_migc=not args.no_migc) for s in seeds]
    with torch.no_grad():
        imgs = to_uint8(sample(model, reqs, schedule))
    for r, img in zip(reqs, imgs):
        save_png(img, run / f"seed{r.seed}.png")
    sidecar = {"checkpoint": str(args.checkpoint), "ablation": meta.get("ablation"),
               "prompt": req["prompt"], "instances": req["instances"],
               "images": [{"file": f"seed{r.seed}.png", **r.settings()} for r in reqs]}
    (run / "generation.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    print(run)
    return EXIT_OK


# -- bench / eval -----------------------------------------------------------------


def _print_rows(title, rows):
    from .bench.run import METRIC_COLUMNS

    print(title)
    print("  " + "  ".join(f"{c:>22}" for c in METRIC_COLUMNS))
    for r in rows:
        vals = [str(r.get("level")), str(r.get("n_images", ""))]
        vals += [f"{r[k]:.4f}" for k in METRIC_COLUMNS[2:]]
        print("  " + "  ".join(f"{v:>22}" for v in vals))


def cmd_bench(args) -> int:
    from .bench.run import (SamplerSettings, default_benchmark, delta_table, gt_selfcheck, run_bench,
                            write_manifest, write_metrics_csv)
    from .config import RunConfig

    cfg = RunConfig.load(args.config)
    layouts = default_benchmark(cfg.bench)
    run = make_run_dir(args.out, "bench", args.run_name)
    cfg.save(run / "config.ini")
    write_manifest(layouts, run / "manifest.jsonl")
    write_run_manifest(run, "bench", sys.argv, {"config": args.config, "checkpoint": args.checkpoint})
    if args.gt_selfcheck:
        rows = gt_selfcheck(layouts, cfg.bench, cfg.color_table)
        write_metrics_csv(rows, run / "gt_metrics.csv")
        _print_rows("ground-truth self-check", rows)
    settings = dict(steps=args.steps, cfg_scale=args.cfg_scale, uncond_migc=cfg.uncond_migc)
    variants = [("no_migc", False)] if args.no_migc else [("migc", True)]
    if args.compare and not args.no_migc:
        variants = [("no_migc", False), ("migc", True)]
    results = {}
    for name, use in variants:
        out = run / name if len(variants) > 1 else run
        _, rows = run_bench(args.checkpoint, layouts, cfg.bench, SamplerSettings(use_migc=use, **settings),
                            workers=args.workers, out_dir=out, ranges=cfg.color_table,
                            save_images=not args.no_images)
        results[name] = rows
        _print_rows(name, rows)
    if len(results) == 2:
        delta = delta_table(results["no_migc"], results["migc"])
        write_metrics_csv([{**d, "n_images": r["n_images"]} for d, r in zip(delta, results["migc"])],
                          run / "delta.csv")
        _print_rows("delta (migc - no_migc)", delta)
    print(run)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .bench.run import evaluate_directory, read_manifest, write_metrics_csv, write_verdicts
    from .config import RunConfig

    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    layouts = read_manifest(args.manifest)
    seeds = args.seeds or list(range(cfg.bench.seed_base, cfg.bench.seed_base + cfg.bench.spec.seeds_per_layout))
    records, rows = evaluate_directory(args.images, layouts, seeds, cfg.bench, cfg.color_table)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_verdicts(records, out / "verdicts.jsonl")
    write_metrics_csv(rows, out / "metrics.csv")
    _print_rows("evaluation", rows)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_suite

    rows = run_suite(args.scope, seed=args.seed)
    width = max(len(r["block"]) for r in rows)
    for r in rows:
        status = "ok" if r["passed"] else "FAIL"
        print(f"{r['block']:<{width}}  max_rel_err={r['max_rel_err']:.3e}  params={r['n_params']:<6} {status}")
    if all(r["passed"] for r in rows):
        return EXIT_OK
    print(f"gradient check exceeded {TOLERANCE:g}", file=sys.stderr)
    return EXIT_NUMERIC


# -- entry ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="migc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train the controller (optionally the backbone first)")
    t.add_argument("config")
    t.add_argument("--out", default="runs")
    t.add_argument("--run-name")
    t.add_argument("--backbone", help="stage-0 backbone checkpoint")
    t.add_argument("--pretrain-backbone", action="store_true")
    t.add_argument("--ablate", choices=["ea", "la", "sac", "loss"])
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="sample images for a layout request")
    g.add_argument("request")
    g.add_argument("checkpoint")
    g.add_argument("--out", default="runs")
    g.add_argument("--run-name")
    g.add_argument("--seed", type=int, action="append")
    g.add_argument("--steps", type=int)
    g.add_argument("--cfg-scale", type=float)
    g.add_argument("--no-migc", action="store_true")
    g.set_defaults(func=cmd_generate)

    b = sub.add_parser("bench", help="build, generate and score the synthetic benchmark")
    b.add_argument("config")
    b.add_argument("checkpoint")
    b.add_argument("--out", default="runs")
    b.add_argument("--run-name")
    b.add_argument("--workers", type=int, default=1)
    b.add_argument("--gt-selfcheck", action="store_true")
    b.add_argument("--no-migc", action="store_true")
    b.add_argument("--compare", action="store_true", help="run with and without MIGC and emit a delta table")
    b.add_argument("--steps", type=int)
    b.add_argument("--cfg-scale", type=float)
    b.add_argument("--no-images", action="store_true")
    b.set_defaults(func=cmd_bench)

    e = sub.add_parser("eval", help="score an image directory against a manifest")
    e.add_argument("manifest")
    e.add_argument("images")
    e.add_argument("--config")
    e.add_argument("--seeds", type=int, nargs="*")
    e.add_argument("--out", default="eval_out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every trainable block")
    c.add_argument("--scope", default="all")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    from .bench.run import OracleClosureError
    from .config import ConfigError
    from .core import ChannelBudgetError
    from .diffusion.checkpoint import CheckpointError
    from .diffusion.train import NumericalAbort
    from .kernel import NonFiniteError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, CheckpointError, ChannelBudgetError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalAbort, NonFiniteError) as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OracleClosureError as e:
        print(f"oracle closure failed: {e}", file=sys.stderr)
        return EXIT_ORACLE


if __name__ == "__main__":
    sys.exit(main())
