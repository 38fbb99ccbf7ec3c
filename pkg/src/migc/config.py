"""Run configuration: INI text with [model], [train] and [bench] sections, strict schema."""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field
from pathlib import Path

from .bench.color import ColorRangeTable
from .bench.evaluate import EvalConfig
from .bench.layouts import BenchmarkSpec
from .bench.run import BenchConfig
from .diffusion.train import TrainConfig
from .diffusion.unet import ModelConfig


class ConfigError(ValueError):
    pass


def _seq(cast):
    def parse(text: str):
        return tuple(cast(v.strip()) for v in text.split(",") if v.strip())
    return parse


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text: str):
    return None if text.strip().lower() in ("", "none", "auto") else int(text)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    if v is None:
        return "auto"
    return repr(v) if isinstance(v, float) else str(v)


MODEL_KEYS = {
    "resolution": int, "channels": _seq(int), "text_dim": int, "head_dim": int, "T": int,
    "beta_start": float, "beta_end": float, "sample_steps": int, "migc_steps": _opt_int,
    "cfg_scale": float, "max_num": int, "fourier_bands": int, "sac_hidden": int, "migc_layers": _seq(str),
}
MODEL_EXTRA = {"uncond_migc": _bool}
TRAIN_KEYS = {
    "lam": float, "lr": float, "batch_size": int, "epochs": int, "k_train": int, "seed": int,
    "cond_drop": float, "weight_decay": float, "shuffle_slots": _bool, "n_images": int,
    "backbone_epochs": int, "backbone_lr": float,
}
SPEC_KEYS = {
    "levels": _seq(int), "layouts_per_level": int, "seeds_per_layout": int, "palette": _seq(str),
    "shapes": _seq(str), "min_side": float, "max_side": float, "max_pair_iou": float, "grid": int, "gap": int,
}
EVAL_KEYS = {"iou_threshold": float, "color_threshold": float, "select": str, "match_shape": _bool,
             "fill_tol": float}
BENCH_KEYS = {"seed": int, "seed_base": int, "chunk_size": int, "color_table": str}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    uncond_migc: bool = False

    @property
    def color_table(self) -> ColorRangeTable:
        return ColorRangeTable()

    # -- text form ---------------------------------------------------------

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp["model"] = {k: _fmt(getattr(self.model, k)) for k in MODEL_KEYS}
        cp["model"]["uncond_migc"] = _fmt(self.uncond_migc)
        cp["train"] = {k: _fmt(getattr(self.train, k)) for k in TRAIN_KEYS}
        sec = {k: _fmt(getattr(self.bench.spec, k)) for k in SPEC_KEYS}
        sec.update({k: _fmt(getattr(self.bench.eval, k)) for k in EVAL_KEYS})
        sec.update({k: _fmt(getattr(self.bench, k)) for k in BENCH_KEYS if k != "color_table"})
        sec["color_table"] = self.color_table.version
        cp["bench"] = sec
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_ini())
        return path

    @classmethod
    def from_ini(cls, text: str, source: str = "<config>") -> "RunConfig":
        cp = configparser.ConfigParser()
        cp.optionxform = str
        try:
            cp.read_string(text, source=source)
        except configparser.Error as e:
            raise ConfigError(str(e)) from None
        unknown_sections = set(cp.sections()) - {"model", "train", "bench"}
        if unknown_sections:
            raise ConfigError(f"{source}: unknown section(s) {sorted(unknown_sections)}")

        def section(name, schema):
            if not cp.has_section(name):
                return {}
            out = {}
            for key, raw in cp[name].items():
                if key not in schema:
                    raise ConfigError(f"{source}: unknown key [{name}] {key}")
                try:
                    out[key] = schema[key](raw)
                except ValueError as e:
                    raise ConfigError(f"{source}: bad value for [{name}] {key}: {e}") from None
            return out

        model = section("model", {**MODEL_KEYS, **MODEL_EXTRA})
        uncond = model.pop("uncond_migc", False)
        train = section("train", TRAIN_KEYS)
        bench = section("bench", {**SPEC_KEYS, **EVAL_KEYS, **BENCH_KEYS})
        table = bench.pop("color_table", ColorRangeTable().version)
        if table != ColorRangeTable().version:
            raise ConfigError(f"{source}: unsupported color table {table!r}")
        try:
            spec = BenchmarkSpec(**{k: v for k, v in bench.items() if k in SPEC_KEYS})
            ev = EvalConfig(**{k: v for k, v in bench.items() if k in EVAL_KEYS})
            model_cfg = ModelConfig(**model)
            bc = BenchConfig(spec, ev, resolution=model_cfg.resolution,
                             **{k: v for k, v in bench.items() if k in BENCH_KEYS})
            return cls(model_cfg, TrainConfig(**train), bc, uncond)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{source}: {e}") from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        return cls.from_ini(text, str(path))

