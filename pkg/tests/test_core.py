import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from migc.core import (
    MIGC, Ablation, ChannelBudgetError, EnhancementAttention, LayoutAttention, PositionNet,
    ShadingAggregationController, background_shading, cross_attention_shading, enhancement_attention,
    layout_attention, make_grounded_tokens, mask_average, pad_shading_channels, sac_aggregate,
    shuffle_instance_slots, to_maps, to_tokens,
)
from migc.kernel import Attention, FourierSpec
from migc.layout import MaskSet, build_layout_attention_mask, rasterize_boxes

D = torch.float64
C, TXT = 6, 5


def rand(*shape, seed=0):
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed), dtype=D)


def random_boxes(n, seed):
    g = torch.Generator().manual_seed(seed)
    lo = torch.rand(n, 2, generator=g, dtype=D) * 0.6
    return torch.cat([lo, (lo + 0.15 + torch.rand(n, 2, generator=g, dtype=D) * 0.25).clamp(max=1)], -1)


def perturb(module, seed=0, std=0.3):
    g = torch.Generator().manual_seed(seed)
    module.double()
    with torch.no_grad():
        for p in module.parameters():
            p.add_(torch.randn(p.shape, generator=g, dtype=D) * std)
    return module


# -- stage 1 / 2 ---------------------------------------------------------------------


def test_cross_attention_shading_masking():
    attn = Attention(C, TXT, head_dim=4).double()
    feat, text = rand(C, 4, 5), rand(2, TXT, seed=1)
    assert torch.equal(cross_attention_shading(feat, text, torch.zeros(4, 5, dtype=D), attn), torch.zeros(C, 4, 5, dtype=D))
    full = cross_attention_shading(feat, text, torch.ones(4, 5, dtype=D), attn)
    unmasked = to_maps(attn(to_tokens(feat[None]), text[None]), 4, 5)[0]
    assert torch.equal(full, unmasked)
    with pytest.raises(ValueError):
        cross_attention_shading(feat, text, torch.ones(3, 3, dtype=D), attn)


def test_background_shading_full_cover_and_empty():
    attn = Attention(C, TXT, head_dim=4).double()
    feat, prompt = rand(C, 4, 4), rand(4, TXT, seed=2)
    ms = MaskSet.from_boxes([[0, 0, 1, 1]], 4, 4, dtype=D)
    assert torch.equal(background_shading(feat, prompt, ms.background, attn), torch.zeros(C, 4, 4, dtype=D))
    empty = MaskSet.from_boxes([], 4, 4, dtype=D)
    out = background_shading(feat, prompt, empty.background, attn)
    assert torch.equal(out, to_maps(attn(to_tokens(feat[None]), prompt[None]), 4, 4)[0])


def test_grounded_tokens():
    net = PositionNet(TXT, FourierSpec(4)).double()
    desc = rand(2, TXT)
    a = make_grounded_tokens(desc, torch.tensor([0.1, 0.1, 0.4, 0.5], dtype=D), net)
    b = make_grounded_tokens(desc, torch.tensor([0.5, 0.1, 0.8, 0.5], dtype=D), net)
    assert a.shape == (3, TXT)
    assert torch.equal(a[:2], b[:2]) and not torch.equal(a[2], b[2])
    again = make_grounded_tokens(desc, torch.tensor([0.1, 0.1, 0.4, 0.5], dtype=D), net)
    assert torch.equal(a, again)
    pad = make_grounded_tokens(torch.zeros(2, TXT, dtype=D), torch.zeros(4, dtype=D), net)
    assert pad.shape == (3, TXT)


def test_enhancement_attention_zero_init_and_support():
    ea = EnhancementAttention(C, TXT, head_dim=4, fourier=FourierSpec(4)).double()
    feat, r_first = rand(C, 4, 4), rand(C, 4, 4, seed=3)
    box = torch.tensor([0.0, 0.0, 0.5, 0.75], dtype=D)
    mask = rasterize_boxes(box[None], 4, 4, dtype=D)[0]
    r_first = r_first * mask
    g = make_grounded_tokens(rand(2, TXT, seed=4), box, ea.position_net)
    assert torch.equal(enhancement_attention(feat, g, mask, r_first, ea), r_first)
    perturb(ea)
    g = make_grounded_tokens(rand(2, TXT, seed=4), box, ea.position_net)
    out = enhancement_attention(feat, g, mask, r_first, ea)
    assert not torch.equal(out, r_first)
    assert (out * (1 - mask)).abs().max() == 0
    zero = torch.zeros(4, 4, dtype=D)
    assert torch.equal(enhancement_attention(feat, g, zero, r_first, ea), r_first)


def test_same_description_different_boxes_give_different_ea_keys():
    ea = perturb(EnhancementAttention(C, TXT, head_dim=4, fourier=FourierSpec(4)))
    desc = rand(2, TXT)
    k1 = ea.attn.to_k(make_grounded_tokens(desc, torch.tensor([0.0, 0.0, 0.4, 0.4], dtype=D), ea.position_net))
    k2 = ea.attn.to_k(make_grounded_tokens(desc, torch.tensor([0.5, 0.5, 0.9, 0.9], dtype=D), ea.position_net))
    assert not torch.allclose(k1[2], k2[2])


# -- layout attention --------------------------------------------------------------------


def test_layout_attention_full_frame_is_self_attention():
    la = LayoutAttention(C, head_dim=4).double()
    feat = rand(C, 3, 3)
    passes = build_layout_attention_mask(torch.ones(1, 3, 3))
    out = layout_attention(feat, passes, la)
    assert torch.allclose(out, to_maps(la.attn(to_tokens(feat[None])), 3, 3)[0], atol=1e-15)


def test_layout_attention_two_pixel_case_returns_values():
    la = LayoutAttention(C, head_dim=4).double()
    feat = rand(C, 1, 2)
    members = torch.tensor([[[1.0, 0.0]], [[0.0, 1.0]]])
    out = layout_attention(feat, build_layout_attention_mask(members), la)
    v = la.attn.to_out(la.attn.to_v(to_tokens(feat[None])))
    assert torch.allclose(to_tokens(out[None]), v, atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_layout_attention_region_isolation(seed):
    la = LayoutAttention(C, head_dim=4).double()
    ms = MaskSet.from_boxes([[0, 0, 0.5, 1], [0.5, 0, 1, 0.5]], 4, 4, dtype=D)
    passes = build_layout_attention_mask(ms.layout_members)
    feat = rand(C, 4, 4, seed=seed)
    inside = ms.instances[0].bool()
    changed = feat.clone()
    changed[:, inside] = rand(C, int(inside.sum()), seed=seed + 1)
    a, b = layout_attention(feat, passes, la), layout_attention(changed, passes, la)
    far = ms.instances[1].bool()
    assert (a[:, far] - b[:, far]).abs().max() <= 1e-12
    assert not torch.allclose(a[:, inside], b[:, inside])


# -- SAC -------------------------------------------------------------------------------------


def make_sac(max_num=3):
    return ShadingAggregationController(C, max_num=max_num, hidden=4, reduction=2, kernel_size=3).double()


def test_sac_uniform_when_no_instances():
    sac = make_sac()
    bg, la = rand(C, 4, 4), rand(C, 4, 4, seed=1)
    masks = torch.stack([torch.ones(4, 4, dtype=D), torch.ones(4, 4, dtype=D)])
    out, w = sac_aggregate(torch.stack([bg, la]), masks, sac)
    assert torch.allclose(out, (bg + la) / 2, atol=1e-15)
    assert w.shape == (5, 4, 4) and torch.equal(w[:3], torch.zeros(3, 4, 4, dtype=D))


def test_sac_forced_one_hot_selects_instance():
    sac = make_sac()
    with torch.no_grad():
        sac.head.bias[0] = 200.0
    shading = rand(3, C, 4, 4)
    masks = torch.stack([torch.ones(4, 4, dtype=D)] * 3)
    out, _ = sac_aggregate(shading, masks, sac)
    assert torch.equal(out, shading[0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 3), st.integers(0, 10_000), st.booleans())
def test_sac_weights_convex(n, seed, shuffle):
    sac = perturb(make_sac(), seed)
    ms = MaskSet.from_boxes(random_boxes(n, seed).tolist(), 5, 5, dtype=D)
    inst, bg, la = rand(1, n, C, 5, 5, seed=seed), rand(1, C, 5, 5, seed=seed + 1), rand(1, C, 5, 5, seed=seed + 2)
    valid = torch.ones(1, n, dtype=torch.bool)
    out, w = sac(inst, ms.instances[None], valid, bg, ms.background[None], la,
                 generator=torch.Generator().manual_seed(seed), shuffle=shuffle)
    assert ((w.sum(1) - 1).abs() <= 1e-6).all() and (w >= 0).all()
    stack = torch.cat([inst, bg[:, None], la[:, None]], 1)
    assert (out >= stack.min(1).values - 1e-12).all() and (out <= stack.max(1).values + 1e-12).all()


def test_sac_channel_budget():
    sac = make_sac(max_num=2)
    with pytest.raises(ChannelBudgetError, match="max_num"):
        sac_aggregate(rand(5, C, 4, 4), torch.ones(5, 4, 4, dtype=D), sac)


def test_pad_shading_channels():
    f_pad = rand(4, 4)
    f_inst = rand(1, 3, 4, 4, seed=1)
    f_bg, f_la = rand(1, 4, 4, seed=2), rand(1, 4, 4, seed=3)
    full = pad_shading_channels(f_inst, f_bg, f_la, f_pad, 3)
    assert torch.equal(full[:, :3], f_inst)
    empty = pad_shading_channels(f_inst[:, :0], f_bg, f_la, f_pad, 3)
    assert all(torch.equal(empty[0, k], f_pad) for k in range(3))
    assert torch.equal(empty[0, 3], f_bg[0]) and torch.equal(empty[0, 4], f_la[0])
    with pytest.raises(ChannelBudgetError):
        pad_shading_channels(rand(1, 4, 4, 4), f_bg, f_la, f_pad, 3)


def test_padding_feature_is_intra_of_zero_input():
    sac = perturb(make_sac())
    f = sac.padding_feature(C, 4, 4, D)
    assert torch.equal(f, sac.intra_features(torch.zeros(1, C, 4, 4, dtype=D), torch.zeros(1, 4, 4, dtype=D))[0])


def test_shuffle_keeps_background_and_template_slots():
    f = torch.arange(2 * 5, dtype=D).view(2, 5, 1, 1).expand(2, 5, 2, 2)
    shading = f.unsqueeze(2)
    valid = torch.tensor([[True, False, False, True, True]] * 2)
    g = torch.Generator().manual_seed(0)
    f2, s2, v2 = shuffle_instance_slots(f, shading, valid, 3, g)
    for b in range(2):
        assert torch.equal(f2[b, 3:], f[b, 3:]) and torch.equal(s2[b, 3:], shading[b, 3:])
        assert sorted(f2[b, :3, 0, 0].tolist()) == sorted(f[b, :3, 0, 0].tolist())
        assert int(v2[b, :3].sum()) == 1


# -- MIGC composite --------------------------------------------------------------------------------


def migc_inputs(n=2, H=4, W=4, seed=0):
    boxes = random_boxes(n, seed)[None]
    masks = rasterize_boxes(boxes, H, W, dtype=D)
    bg = 1 - masks.amax(1) if n else torch.ones(1, H, W, dtype=D)
    return dict(h=rand(1, H * W, C, seed=seed), H=H, W=W, prompt_ctx=rand(1, 4, TXT, seed=seed + 1),
                inst_ctx=rand(1, n, 2, TXT, seed=seed + 2), boxes=boxes,
                inst_valid=torch.ones(1, n, dtype=torch.bool), inst_masks=masks, bg_mask=bg)


def make_migc(ablation=Ablation()):
    return MIGC(C, TXT, head_dim=4, max_num=3, sac_hidden=4, fourier=FourierSpec(4), ablation=ablation).double()


def test_zero_init_migc_is_noop():
    frozen = Attention(C, TXT, head_dim=4).double()
    migc = make_migc()
    kw = migc_inputs()
    out = migc(kw["h"], kw["H"], kw["W"], frozen, kw["prompt_ctx"], kw["inst_ctx"], kw["boxes"], kw["inst_valid"],
               kw["inst_masks"], kw["bg_mask"])
    assert torch.equal(out, frozen(kw["h"], kw["prompt_ctx"]))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 3), st.integers(0, 10_000))
def test_migc_support_invariants(n, seed):
    frozen = perturb(Attention(C, TXT, head_dim=4), seed)
    migc = perturb(make_migc(), seed + 1)
    kw = migc_inputs(n, 5, 5, seed)
    _, s = migc(kw["h"], 5, 5, frozen, kw["prompt_ctx"], kw["inst_ctx"], kw["boxes"], kw["inst_valid"],
                kw["inst_masks"], kw["bg_mask"], return_shading=True)
    outside = (1 - kw["inst_masks"])[:, :, None]
    assert (s.first * outside).abs().max() == 0 if n else True
    assert (s.instance * outside).abs().max() == 0 if n else True
    assert (s.background * (1 - kw["bg_mask"])[:, None]).abs().max() == 0
    assert ((s.weights.sum(1) - 1).abs() <= 1e-6).all()


def test_single_full_frame_instance_with_one_hot_sac():
    frozen = Attention(C, TXT, head_dim=4).double()
    migc = perturb(make_migc())
    with torch.no_grad():
        migc.sac.head.weight.zero_()
        migc.sac.head.bias.zero_()
        migc.sac.head.bias[0] = 200.0
        migc.gate.weight.copy_(torch.eye(C, dtype=D))
        migc.gate.bias.zero_()
    kw = migc_inputs(1)
    kw["boxes"] = torch.tensor([[[0.0, 0.0, 1.0, 1.0]]], dtype=D)
    kw["inst_masks"] = torch.ones(1, 1, 4, 4, dtype=D)
    kw["bg_mask"] = torch.zeros(1, 4, 4, dtype=D)
    out, s = migc(kw["h"], 4, 4, frozen, kw["prompt_ctx"], kw["inst_ctx"], kw["boxes"], kw["inst_valid"],
                  kw["inst_masks"], kw["bg_mask"], return_shading=True)
    assert torch.allclose(out, to_tokens(s.instance[:, 0]), atol=1e-12)


def test_ablations():
    frozen = perturb(Attention(C, TXT, head_dim=4))
    kw = migc_inputs(2)
    args = (kw["h"], 4, 4, frozen, kw["prompt_ctx"], kw["inst_ctx"], kw["boxes"], kw["inst_valid"],
            kw["inst_masks"], kw["bg_mask"])
    no_ea = perturb(make_migc(Ablation.from_name("ea")))
    _, s = no_ea(*args, return_shading=True)
    assert torch.equal(s.instance, s.first)
    no_la = perturb(make_migc(Ablation.from_name("la")))
    _, s = no_la(*args, return_shading=True)
    assert torch.equal(s.template, torch.zeros_like(s.template))
    assert torch.equal(s.weights[:, -1], torch.zeros_like(s.weights[:, -1]))
    no_sac = perturb(make_migc(Ablation.from_name("sac")))
    _, s = no_sac(*args, return_shading=True)
    ref, w = mask_average(s.instance, kw["inst_masks"], kw["inst_valid"], s.background, kw["bg_mask"], s.template,
                          torch.ones(1, dtype=torch.bool))
    assert torch.equal(s.extras["final"], ref)
    assert Ablation.from_name("loss") == Ablation() == Ablation.from_name(None)
    with pytest.raises(ValueError):
        Ablation.from_name("gate")


def test_migc_channel_budget():
    migc = make_migc()
    kw = migc_inputs(4)
    with pytest.raises(ChannelBudgetError, match="raise max_num"):
        migc(kw["h"], 4, 4, Attention(C, TXT, head_dim=4).double(), kw["prompt_ctx"], kw["inst_ctx"], kw["boxes"],
             kw["inst_valid"], kw["inst_masks"], kw["bg_mask"])
