"""Two-stage training on a small corpus, then sampling with and without MIGC.

Minutes on one core, so the model is far from converged; the point is the
plumbing: stage 0 trains the backbone on global prompts, stage 1 freezes it
and trains only the controllers, and sampling can switch the controllers off.
Pass a checkpoint to skip training, e.g. ``artifacts/study/migc_full.npz``.

    python demos/train_and_generate.py [checkpoint.npz]
"""

import sys

import numpy as np
import torch
from PIL import Image

from migc.bench.evaluate import compute_metrics, evaluate_image
from migc.bench.layouts import BenchmarkSpec, build_benchmark
from migc.diffusion.checkpoint import load_checkpoint
from migc.diffusion.data import build_corpus
from migc.diffusion.sample import GenerationRequest, sample, to_uint8
from migc.diffusion.schedule import NoiseSchedule
from migc.diffusion.train import TrainConfig, train_backbone, train_migc
from migc.diffusion.unet import ModelConfig, UNetLite

torch.set_num_threads(1)

if len(sys.argv) > 1:
    model, schedule, meta = load_checkpoint(sys.argv[1])
    print("loaded", sys.argv[1], "stage", meta.get("stage"))
else:
    corpus = build_corpus(n_images=400, seed=0)
    torch.manual_seed(0)
    model = UNetLite(ModelConfig())
    schedule = NoiseSchedule()
    tc = TrainConfig(n_images=400, backbone_epochs=4, epochs=2, lr=1e-3, backbone_lr=1e-3)
    for row in train_backbone(model, corpus, tc, schedule):
        print(f"backbone epoch {row['epoch']}: L_LDM={row['L_LDM']:.4f}")
    for row in train_migc(model, corpus, tc, schedule):
        print(f"migc epoch {row['epoch']}: L_LDM={row['L_LDM']:.4f} L_ihbt={row['L_ihbt']:.4f}")

layouts = build_benchmark(BenchmarkSpec(levels=(2, 3), layouts_per_level=4), seed=11)
rows = []
for use in (True, False):
    reqs = []
    for lay in layouts:
        descs = [(i.color, i.shape) for i in lay.instances]
        reqs.append(GenerationRequest(descs, descs, [i.box for i in lay.instances], seed=0, use_migc=use))
    images = to_uint8(sample(model, reqs, schedule))
    records = [v for lay, img in zip(layouts, images) for v in evaluate_image(img / 255.0, lay)]
    print("MIGC" if use else "no MIGC", {k: round(v, 3) for k, v in compute_metrics(records).items()})
    rows.append(np.concatenate(list(images), 1))

Image.fromarray(np.concatenate(rows, 0)).resize((256 * 4, 64 * 4), Image.NEAREST).save("generate_demo.png")
print("wrote generate_demo.png (top: MIGC, bottom: no MIGC)")
