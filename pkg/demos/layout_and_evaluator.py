"""Walk through the geometry and the evaluator without any trained model.

Builds one benchmark layout, prints its layout-attention mask statistics,
renders the ground truth, and scores it (every instance should succeed).
Then it repaints one instance in another colour to show a failure verdict.

    python demos/layout_and_evaluator.py [out.png]
"""

import sys

import numpy as np
import torch
from PIL import Image

from migc.bench.evaluate import compute_metrics, evaluate_image
from migc.bench.layouts import BenchmarkSpec, build_benchmark
from migc.bench.render import CANONICAL_RGB, render_ground_truth
from migc.layout import background_mask, build_layout_attention_mask, rasterize_boxes

layout = build_benchmark(BenchmarkSpec(levels=(4,), layouts_per_level=1), seed=3)[0]
print(layout.prompt)
for inst in layout.instances:
    print(f"  {inst.color:>6} {inst.shape:<8} box={[round(float(v), 3) for v in inst.box]}")

masks = rasterize_boxes(torch.tensor([[i.box for i in layout.instances]]), 16, 16)[0]
members = torch.cat([background_mask(masks)[None], masks])
allowed = build_layout_attention_mask(members)
print(f"\n16x16 layout-attention mask: {int(allowed.sum())} of {allowed.numel()} pairs allowed")

image, visible = render_ground_truth(layout)
records = evaluate_image(image, layout)
print("ground truth:", {k: round(v, 3) for k, v in compute_metrics(records).items()})

first = layout.instances[0]
other = next(c for c in CANONICAL_RGB if c != first.color)
wrong = image.copy()
wrong[visible[0]] = CANONICAL_RGB[other]
verdict = evaluate_image(wrong, layout)[0].as_dict()
print(f"first instance painted {other}: position={verdict['position_correct']} "
      f"color={verdict['color_correct']} fully={verdict['fully_correct']}")

out = sys.argv[1] if len(sys.argv) > 1 else "layout_demo.png"
pair = np.concatenate([image, wrong], 1)
Image.fromarray((pair * 255).round().astype(np.uint8)).resize((512, 256), Image.NEAREST).save(out)
print("wrote", out)
