"""Versioned ``.npz`` checkpoints: named parameter blocks, schedule constants, vocab."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from ..core import Ablation
from .schedule import NoiseSchedule
from .unet import ModelConfig, UNetLite

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: UNetLite, schedule: NoiseSchedule, stage: str = "migc",
                    ablation_name: str | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    meta = {
        "version": FORMAT_VERSION,
        "stage": stage,
        "config": model.config.as_dict(),
        "ablation": ablation_name,
        "vocab": list(model.encoder.vocab.tokens),
        "extra": extra or {},
    }
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays["schedule/alphas_cumprod"] = schedule.alphas_cumprod.numpy()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    return path


def read_meta(path) -> dict:
    with np.load(path, allow_pickle=False) as z:
        if "meta" not in z:
            raise CheckpointError(f"{path}: not a checkpoint (no meta block)")
        meta = json.loads(str(z["meta"]))
    if meta.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {meta.get('version')} != supported {FORMAT_VERSION}")
    return meta


def load_checkpoint(path, ablation_name: str | None = "__stored__", backbone_only: bool = False):
    """-> (model, schedule, meta).  ``backbone_only`` keeps fresh controller weights."""
    meta = read_meta(path)
    cfg = ModelConfig(**meta["config"])
    name = meta.get("ablation") if ablation_name == "__stored__" else ablation_name
    model = UNetLite(cfg, Ablation.from_name(name))
    if list(model.encoder.vocab.tokens) != meta["vocab"]:
        raise CheckpointError(f"{path}: vocabulary mismatch")
    with np.load(path, allow_pickle=False) as z:
        state = {k[len("param/"):]: torch.from_numpy(z[k].copy()) for k in z.files if k.startswith("param/")}
        ac = torch.from_numpy(z["schedule/alphas_cumprod"].copy())
    if backbone_only:
        state = {k: v for k, v in state.items() if ".migc." not in k}
        missing, unexpected = model.load_state_dict(state, strict=False)
        if unexpected or any(".migc." not in k for k in missing):
            raise CheckpointError(f"{path}: backbone blocks do not match the model ({missing[:3]}, {unexpected[:3]})")
    else:
        try:
            model.load_state_dict(state, strict=True)
        except RuntimeError as e:
            raise CheckpointError(f"{path}: {e}") from None
    schedule = NoiseSchedule.from_alphas_cumprod(ac, cfg.beta_start, cfg.beta_end)
    model.ablation_name = name
    return model, schedule, meta
