import itertools

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from migc.layout import (
    BoundingBox, MaskSet, background_mask, build_layout_attention_mask, iou, rasterize_boxes, rasterize_mask,
)


def brute_force_pass(members):
    """(p, q) passes iff some region mask holds both pixels."""
    K, H, W = members.shape
    out = torch.zeros(H * W, H * W, dtype=torch.bool)
    for p, q in itertools.product(range(H * W), repeat=2):
        a, b = divmod(p, W), divmod(q, W)
        out[p, q] = any(bool(members[k][a]) and bool(members[k][b]) for k in range(K))
    return out


def pixel_iou(a, b):
    """IoU by counting unit cells on an integer grid."""
    cells = lambda box: {(x, y) for x in range(box[0], box[2]) for y in range(box[1], box[3])}  # noqa: E731
    A, B = cells(a), cells(b)
    return len(A & B) / len(A | B)


def test_box_validation():
    BoundingBox.null()
    with pytest.raises(ValueError):
        BoundingBox(0.5, 0.0, 0.2, 1.0)
    with pytest.raises(ValueError):
        BoundingBox(0.2, 0.2, 0.2, 0.4)
    with pytest.raises(ValueError):
        BoundingBox.coerce([0, 0, 1.5, 1]).check_normalized()
    assert BoundingBox.coerce([0.0, 0.0, 0.5, 0.25]).area == 0.125


def test_rasterize_examples():
    assert torch.equal(rasterize_mask([0, 0, 1, 1], 4, 4), torch.ones(4, 4))
    m = rasterize_mask([0, 0, 0.5, 0.5], 4, 4)
    expect = torch.zeros(4, 4)
    expect[:2, :2] = 1
    assert torch.equal(m, expect)
    assert torch.equal(rasterize_mask([0, 0, 0, 0], 5, 3), torch.zeros(5, 3))
    with pytest.raises(ValueError):
        rasterize_mask([0.6, 0, 0.5, 1], 4, 4)


def test_rasterize_pixel_center_rule_and_half_open_edges():
    # centres of a 4-wide row are 0.125, 0.375, 0.625, 0.875
    assert rasterize_mask([0.125, 0, 0.625, 1], 1, 4).tolist() == [[1, 1, 0, 0]]
    assert rasterize_mask([0.13, 0, 0.9, 1], 1, 4).tolist() == [[0, 1, 1, 1]]


def test_tiny_box_lights_centre_pixel():
    m = rasterize_mask([0.30, 0.30, 0.32, 0.32], 4, 4)
    assert m.sum() == 1 and m[1, 1] == 1
    assert rasterize_mask([0.30, 0.30, 0.32, 0.32], 4, 4, ensure_nonempty=False).sum() == 0


@settings(max_examples=80, deadline=None)
@given(st.floats(0, 0.9), st.floats(0, 0.9), st.floats(0.05, 1), st.floats(0.05, 1),
       st.integers(1, 12), st.integers(1, 12))
def test_rasterized_area_tracks_box_area(x, y, w, h, H, W):
    box = [x, y, min(1.0, x + w), min(1.0, y + h)]
    m = rasterize_mask(box, H, W, ensure_nonempty=False)
    area = (box[2] - box[0]) * (box[3] - box[1])
    assert abs(float(m.sum()) / (H * W) - area) <= 2 * (W + H) / (H * W)


def test_vectorised_matches_single():
    g = torch.Generator().manual_seed(0)
    lo = torch.rand(3, 5, 2, generator=g) * 0.6
    boxes = torch.cat([lo, lo + 0.05 + torch.rand(3, 5, 2, generator=g) * 0.35], -1)
    boxes[1, 2] = 0
    batch = rasterize_boxes(boxes, 7, 9)
    for i, j in itertools.product(range(3), range(5)):
        assert torch.equal(batch[i, j], rasterize_mask(boxes[i, j].tolist(), 7, 9))


def test_background_mask_examples():
    assert torch.equal(background_mask([], shape=(3, 3)), torch.ones(3, 3))
    assert torch.equal(background_mask([torch.ones(4, 4)]), torch.zeros(4, 4))
    q1 = rasterize_mask([0, 0, 0.5, 0.5], 4, 4)
    q4 = rasterize_mask([0.5, 0.5, 1, 1], 4, 4)
    assert background_mask([q1, q4]).sum() == 8
    with pytest.raises(ValueError):
        background_mask([torch.ones(2, 2), torch.ones(3, 3)])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 4), st.integers(0, 10_000))
def test_background_complements_instances(n, seed):
    g = torch.Generator().manual_seed(seed)
    masks = (torch.rand(n, 5, 6, generator=g) > 0.6).float()
    bg = background_mask(masks) if n else background_mask([], shape=(5, 6))
    top = masks.amax(0) if n else torch.zeros(5, 6)
    assert torch.equal(bg + top, torch.ones(5, 6))


def test_maskset():
    ms = MaskSet.from_boxes([[0, 0, 0.5, 1], [0.5, 0, 1, 1]], 4, 4)
    assert ms.instances.shape == (2, 4, 4)
    assert ms.background.sum() == 0
    assert torch.equal(ms.layout, torch.ones(4, 4))
    assert torch.equal(ms.layout_members[0], ms.background)


def test_layout_mask_examples():
    two = torch.tensor([[[1.0, 0.0]], [[0.0, 1.0]]])  # M1 then M_bg on a 1x2 image
    assert build_layout_attention_mask(two).tolist() == [[True, False], [False, True]]
    assert build_layout_attention_mask(torch.ones(1, 2, 2)).all()
    m1 = torch.tensor([[1.0, 1.0, 0.0]])
    m2 = torch.tensor([[0.0, 1.0, 1.0]])
    A = build_layout_attention_mask(torch.stack([m1, m2]))
    assert A[1].all()  # the shared pixel sees both regions
    assert not A[0, 2] and not A[2, 0]


def test_layout_mask_matches_brute_force_exhaustively_small():
    for H, W in [(1, 2), (2, 2), (2, 3)]:
        cells = H * W
        for bits in itertools.product([0, 1], repeat=2 * cells):
            members = torch.tensor(bits, dtype=torch.float32).view(2, H, W)
            assert torch.equal(build_layout_attention_mask(members), brute_force_pass(members))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
def test_layout_mask_symmetric_with_passing_diagonal(H, W, n, seed):
    g = torch.Generator().manual_seed(seed)
    inst = (torch.rand(n, H, W, generator=g) > 0.5).float()
    members = torch.cat([background_mask(inst)[None], inst])
    A = build_layout_attention_mask(members)
    assert torch.equal(A, A.T)
    assert A.diagonal().all()
    assert torch.equal(A, brute_force_pass(members))


def test_iou_examples():
    assert iou([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0
    assert iou([0, 0, 1, 1], [2, 2, 3, 3]) == 0.0
    assert abs(iou([0, 0, 2, 2], [1, 1, 3, 3]) - 1 / 7) < 1e-15
    assert iou(BoundingBox(0, 0, 0.5, 0.5), [0, 0, 0.5, 1.0]) == 0.5


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 12), min_size=8, max_size=8))
def test_iou_matches_pixel_count_on_integer_boxes(c):
    a = [min(c[0], c[1]), min(c[2], c[3]), max(c[0], c[1]) + 1, max(c[2], c[3]) + 1]
    b = [min(c[4], c[5]), min(c[6], c[7]), max(c[4], c[5]) + 1, max(c[6], c[7]) + 1]
    assert iou(a, b) == pixel_iou(a, b)
    assert iou(a, b) == iou(b, a)


def test_iou_monotone_under_shrinking_intersection():
    a = [0, 0, 4, 4]
    prev = 1.0
    for shift in range(5):
        v = iou(a, [shift, 0, shift + 4, 4])
        assert v <= prev
        prev = v
