import json

import pytest
import torch

from migc import gradcheck
from migc.bench.run import read_metrics_csv
from migc.cli import main
from migc.config import ConfigError, RunConfig
from migc.diffusion.checkpoint import save_checkpoint
from migc.diffusion.schedule import NoiseSchedule
from migc.diffusion.unet import UNetLite

TINY_INI = """
[model]
resolution = 8
channels = 8, 8, 16
text_dim = 8
head_dim = 4
T = 100
sample_steps = 4
max_num = 4
fourier_bands = 2
sac_hidden = 4

[train]
n_images = 16
batch_size = 8
epochs = 1
backbone_epochs = 1
lr = 0.001
backbone_lr = 0.001

[bench]
levels = 2, 3
layouts_per_level = 2
seeds_per_layout = 2
chunk_size = 3
"""


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "tiny.ini"
    cfg_path.write_text(TINY_INI)
    cfg = RunConfig.load(cfg_path)
    torch.manual_seed(0)
    model = UNetLite(cfg.model)
    g = torch.Generator().manual_seed(1)
    with torch.no_grad():
        for p in model.migc_parameters():
            p.add_(torch.randn(p.shape, generator=g) * 0.2)
    ckpt = save_checkpoint(root / "tiny.npz", model, NoiseSchedule(cfg.model.T, cfg.model.beta_start,
                                                                   cfg.model.beta_end))
    req = root / "req.json"
    req.write_text(json.dumps({
        "prompt": "a red circle and a blue square",
        "instances": [{"desc": "red circle", "box": [0.0, 0.0, 0.5, 0.5]},
                      {"desc": "blue square", "box": [0.5, 0.5, 1.0, 1.0]}],
        "seed": [0, 1],
    }))
    return root, cfg_path, ckpt, req


# -- config ----------------------------------------------------------------------------


def test_config_round_trip(tiny):
    _, cfg_path, _, _ = tiny
    cfg = RunConfig.load(cfg_path)
    assert cfg.model.channels == (8, 8, 16) and cfg.bench.spec.levels == (2, 3)
    assert cfg.bench.resolution == 8
    again = RunConfig.from_ini(cfg.to_ini())
    assert again.to_ini() == cfg.to_ini()
    assert RunConfig.from_ini(RunConfig().to_ini()).to_ini() == RunConfig().to_ini()


@pytest.mark.parametrize("text", [
    "[model]\nresolution = 32\nwidth = 3\n",
    "[extras]\nx = 1\n",
    "[train]\nlr = fast\n",
    "[train]\nlam = -1\n",
    "[bench]\ncolor_table = hsv-v9\n",
    "[model]\nresolution = 30\n",
    "not an ini",
])
def test_config_rejects(text):
    with pytest.raises(ConfigError):
        RunConfig.from_ini(text)


def test_missing_config_exits_1(tmp_path):
    assert main(["bench", str(tmp_path / "nope.ini"), str(tmp_path / "x.npz"), "--out", str(tmp_path)]) == 1


# -- usage ------------------------------------------------------------------------------


def test_usage_errors(tiny, tmp_path):
    _, cfg_path, _, _ = tiny
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["train", str(cfg_path), "--out", str(tmp_path)]) == 1
    assert main(["--help"]) == 0


def test_train_pretrains_backbone_then_controller(tiny, tmp_path):
    _, cfg_path, _, _ = tiny
    assert main(["train", str(cfg_path), "--pretrain-backbone", "--out", str(tmp_path), "--run-name", "r"]) == 0
    run = tmp_path / "r"
    for f in ("config.ini", "run_manifest.json", "backbone_loss.csv", "backbone.npz", "loss_curve.csv",
              "model.npz"):
        assert (run / f).exists(), f
    manifest = json.loads((run / "run_manifest.json").read_text())
    assert len(manifest["inputs"]["config"]["sha256"]) == 64
    assert main(["train", str(cfg_path), "--backbone", str(run / "backbone.npz"), "--ablate", "ea",
                 "--out", str(tmp_path), "--run-name", "ea"]) == 0
    assert (tmp_path / "ea" / "model.npz").exists()


# -- generate ---------------------------------------------------------------------------


def test_generate_is_byte_identical(tiny, tmp_path):
    _, _, ckpt, req = tiny
    for name in ("a", "b"):
        assert main(["generate", str(req), str(ckpt), "--out", str(tmp_path), "--run-name", name]) == 0
    for seed in (0, 1):
        a = (tmp_path / "a" / f"seed{seed}.png").read_bytes()
        assert a == (tmp_path / "b" / f"seed{seed}.png").read_bytes()
    side = json.loads((tmp_path / "a" / "generation.json").read_text())
    assert [i["migc_steps"] for i in side["images"]] == [2, 2]
    assert main(["generate", str(req), str(ckpt), "--out", str(tmp_path), "--run-name", "c", "--no-migc",
                 "--seed", "0"]) == 0
    assert (tmp_path / "c" / "seed0.png").read_bytes() != (tmp_path / "a" / "seed0.png").read_bytes()
    assert not (tmp_path / "c" / "seed1.png").exists()


@pytest.mark.parametrize("payload", [
    {"prompt": "a purple circle", "instances": [{"desc": "purple circle", "box": [0, 0, 0.5, 0.5]}]},
    {"prompt": "a red circle", "instances": [{"desc": "red circle", "box": [0.5, 0, 0.2, 0.5]}]},
    {"prompt": "a red circle", "instances": [{"desc": "red circle"}]},
    {"prompt": "a red circle", "instances": [], "colour": "red"},
    {"prompt": "a red circle", "instances": [{"desc": "red circle", "box": [0, 0, 0.1, 0.1]}] * 5},
])
def test_generate_rejects_bad_requests(tiny, tmp_path, payload):
    _, _, ckpt, _ = tiny
    req = tmp_path / "bad.json"
    req.write_text(json.dumps(payload))
    assert main(["generate", str(req), str(ckpt), "--out", str(tmp_path)]) == 1


def test_generate_missing_checkpoint(tiny, tmp_path):
    _, _, _, req = tiny
    assert main(["generate", str(req), str(tmp_path / "none.npz"), "--out", str(tmp_path)]) == 1


# -- bench / eval -------------------------------------------------------------------------


def test_bench_worker_count_invariance_and_eval(tiny, tmp_path):
    _, cfg_path, ckpt, _ = tiny
    assert main(["bench", str(cfg_path), str(ckpt), "--out", str(tmp_path), "--run-name", "w1"]) == 0
    assert main(["bench", str(cfg_path), str(ckpt), "--out", str(tmp_path), "--run-name", "w2",
                 "--workers", "2"]) == 0
    one, two = tmp_path / "w1", tmp_path / "w2"
    assert (one / "metrics.csv").read_text() == (two / "metrics.csv").read_text()
    assert (one / "verdicts.jsonl").read_text() == (two / "verdicts.jsonl").read_text()
    rows = read_metrics_csv(one / "metrics.csv")
    assert [r["level"] for r in rows] == [2, 3, "all"] and rows[-1]["n_images"] == 8
    assert len(list((one / "images").glob("*.png"))) == 8
    assert main(["eval", str(one / "manifest.jsonl"), str(one / "images"), "--config", str(cfg_path),
                 "--out", str(tmp_path / "ev")]) == 0
    assert (tmp_path / "ev" / "metrics.csv").read_text() == (one / "metrics.csv").read_text()


def test_bench_compare_writes_delta(tiny, tmp_path):
    _, cfg_path, ckpt, _ = tiny
    assert main(["bench", str(cfg_path), str(ckpt), "--out", str(tmp_path), "--run-name", "cmp", "--compare",
                 "--no-images"]) == 0
    run = tmp_path / "cmp"
    assert (run / "delta.csv").exists() and (run / "migc" / "metrics.csv").exists()
    migc = read_metrics_csv(run / "migc" / "metrics.csv")
    base = read_metrics_csv(run / "no_migc" / "metrics.csv")
    delta = read_metrics_csv(run / "delta.csv")
    for d, m, b in zip(delta, migc, base):
        assert d["miou"] == pytest.approx(m["miou"] - b["miou"], abs=2e-6)


def test_gt_selfcheck_failure_exits_3(tiny, tmp_path):
    # at 8 px the templates are too coarse for the detector to close on its own renders
    _, cfg_path, ckpt, _ = tiny
    assert main(["bench", str(cfg_path), str(ckpt), "--out", str(tmp_path), "--gt-selfcheck"]) == 3


def test_gt_selfcheck_passes_at_benchmark_resolution(tmp_path):
    cfg_path = tmp_path / "c.ini"
    cfg_path.write_text(TINY_INI.replace("resolution = 8", "resolution = 32")
                        .replace("layouts_per_level = 2", "layouts_per_level = 10")
                        .replace("seeds_per_layout = 2", "seeds_per_layout = 1"))
    cfg = RunConfig.load(cfg_path)
    ckpt = save_checkpoint(tmp_path / "m.npz", UNetLite(cfg.model), NoiseSchedule(cfg.model.T))
    assert main(["bench", str(cfg_path), str(ckpt), "--out", str(tmp_path), "--run-name", "gt", "--gt-selfcheck",
                 "--no-images"]) == 0
    rows = read_metrics_csv(tmp_path / "gt" / "gt_metrics.csv")
    assert rows[-1]["instance_success_rate"] == 1.0 and rows[-1]["miou"] >= 0.95


def test_eval_missing_image(tiny, tmp_path):
    _, cfg_path, _, _ = tiny
    manifest = tmp_path / "m.jsonl"
    manifest.write_text(json.dumps({"layout_id": "L2_0000", "level": 1, "instances": [
        {"color": "red", "shape": "circle", "box": [0, 0, 0.5, 0.5]}]}) + "\n")
    (tmp_path / "imgs").mkdir()
    assert main(["eval", str(manifest), str(tmp_path / "imgs"), "--seeds", "0", "--out", str(tmp_path)]) == 1


# -- gradcheck ---------------------------------------------------------------------------


class _WrongGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return x.sin()

    @staticmethod
    def backward(ctx, g):
        return g * 1.5  # not the derivative of sin


def test_gradcheck_negative_control(monkeypatch, capsys):
    def broken(gen):
        x = torch.randn(5, generator=gen, dtype=torch.float64, requires_grad=True)
        return (lambda: _WrongGrad.apply(x).sum()), [x]

    monkeypatch.setitem(gradcheck.BLOCKS, "broken", broken)
    with pytest.warns(Warning):
        assert main(["gradcheck", "--scope", "broken"]) == 2
    assert "FAIL" in capsys.readouterr().out


def test_gradcheck_single_block_passes(capsys):
    assert main(["gradcheck", "--scope", "attention"]) == 0
    assert "ok" in capsys.readouterr().out
    assert main(["gradcheck", "--scope", "nonsense"]) == 1
