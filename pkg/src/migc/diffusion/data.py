"""Synthetic training corpus of rendered colored shapes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..bench.layouts import CorpusSpec, sample_training_layout
from ..bench.render import Layout, render_ground_truth
from .unet import Conditioning
from .vocab import PhraseEncoder


@dataclass
class Corpus:
    layouts: list[Layout]
    images: torch.Tensor  # [N, 3, H, W] in [0, 1]

    def __len__(self) -> int:
        return len(self.layouts)

    def conditioning(self, encoder: PhraseEncoder, idx, k: int | None = None) -> Conditioning:
        rows = []
        for i in idx:
            l = self.layouts[int(i)]
            descs = [(x.color, x.shape) for x in l.instances]
            rows.append((descs, descs, [x.box for x in l.instances]))
        return Conditioning.build(encoder, rows, k=k)


def build_corpus(n_images: int = 5000, resolution: int = 32, seed: int = 0,
                 spec: CorpusSpec | None = None) -> Corpus:
    spec = spec or CorpusSpec()
    rng = np.random.default_rng(seed)
    layouts, images = [], []
    for j in range(n_images):
        layout = sample_training_layout(spec, rng)
        layout.layout_id = f"T{j:06d}"
        img, _ = render_ground_truth(layout, resolution)
        layouts.append(layout)
        images.append(img)
    arr = torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).float().contiguous()
    return Corpus(layouts, arr)


def to_model_space(images: torch.Tensor) -> torch.Tensor:
    return images * 2 - 1


def from_model_space(x: torch.Tensor) -> torch.Tensor:
    return ((x + 1) / 2).clamp(0, 1)
