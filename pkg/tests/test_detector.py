import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cs3d.detector import (SUN_BOX_WEIGHTS, AnchorConfig, Detector, DetectorConfig, _corner_loss, box_loss_strong,
                           box_loss_terms, decode_box, decode_params, encode_box, mask_and_center, seg_loss,
                           split_head)
from cs3d.geometry import Box3D, box_corners, normalize_angle

from conftest import boxes

ANCHORS = AnchorConfig(np.array([[1.0, 2.0, 3.0], [0.8, 0.5, 0.6], [1.5, 1.6, 4.0]]), 12)


def head_for(anchors, size_index, size_res, head_bin, head_res, delta=(0.0, 0.0, 0.0), margin=30.0):
    ns, nh = anchors.n_size, anchors.n_heading
    raw = np.zeros(anchors.head_width)
    raw[:3] = delta
    raw[3 + size_index] = margin
    raw[3 + ns + 3 * size_index: 3 + ns + 3 * size_index + 3] = size_res
    raw[3 + 4 * ns + head_bin] = margin
    raw[3 + 4 * ns + nh + head_bin] = head_res
    return raw


def small_detector(onehot=True, n_classes=3, seed=0):
    torch.manual_seed(seed)
    cfg = DetectorConfig(k=0, n_classes=n_classes, seg_onehot=onehot, box_onehot=onehot, seg_local=(16, 16),
                         seg_global=(16,), seg_head=(16,), tnet_point=(16,), tnet_head=(16,), box_point=(16, 16),
                         box_head=(16,))
    return Detector(cfg, ANCHORS)


def test_anchor_config_validation():
    with pytest.raises(ValueError):
        AnchorConfig(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        AnchorConfig(np.ones((1, 3)), n_heading=1)
    with pytest.raises(ValueError):
        AnchorConfig(np.array([[1.0, -1.0, 1.0]]))


def test_head_width_and_bin_centers():
    a = AnchorConfig(np.ones((4, 3)), 12)
    assert a.head_width == 3 + 4 * 4 + 2 * 12
    np.testing.assert_allclose(a.bin_centers(), (np.arange(12) + 0.5) * 2 * math.pi / 12 - math.pi)


def test_zero_residual_decodes_to_anchor_and_bin_center():
    for i in range(ANCHORS.n_size):
        for b in (0, 5, 11):
            box = decode_box(head_for(ANCHORS, i, 0, b, 0.0), ANCHORS, (1.0, 2.0, 3.0))
            assert box.size == tuple(ANCHORS.sizes[i])
            assert box.heading == pytest.approx(ANCHORS.bin_centers()[b], abs=1e-15)
            assert box.center == (1.0, 2.0, 3.0)


def test_residual_arithmetic():
    box = decode_box(head_for(ANCHORS, 0, (0.1, 0.1, 0.1), 3, 0.0), ANCHORS, (0, 0, 0))
    np.testing.assert_allclose(box.size, (1.1, 2.2, 3.3), rtol=1e-15)


def test_center_chain_accumulates():
    raw = torch.from_numpy(head_for(ANCHORS, 0, 0, 0, 0, delta=(0.5, -0.25, 1.0)))[None]
    centroid = torch.tensor([[1.0, 1.0, 1.0]], dtype=torch.float64)
    tnet = centroid + torch.tensor([[0.1, 0.2, 0.3]], dtype=torch.float64)
    params, _ = decode_params(split_head(raw, centroid, tnet, ANCHORS), ANCHORS)
    np.testing.assert_allclose(params[0, :3].numpy(), [1.6, 0.95, 2.3])


def test_negative_size_is_clamped_and_counted():
    raw = torch.from_numpy(head_for(ANCHORS, 1, (-2.0, 0.0, 0.0), 0, 0.0))[None]
    c = torch.zeros(1, 3, dtype=torch.float64)
    params, n = decode_params(split_head(raw, c, c, ANCHORS), ANCHORS)
    assert n == 1 and params[0, 3].item() == pytest.approx(1e-3)


def test_anchor_round_trip_thousand_boxes():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        si = int(rng.integers(ANCHORS.n_size))
        size = ANCHORS.sizes[si] * rng.uniform(0.6, 1.4, 3)
        box = Box3D(tuple(rng.uniform(-5, 5, 3)), tuple(size), float(rng.uniform(-math.pi, math.pi)))
        i, res, hb, hres = encode_box(box, ANCHORS, si)
        out = decode_box(head_for(ANCHORS, i, res, hb, hres), ANCHORS, box.center)
        d = np.abs(out.to_vector() - box.to_vector())
        d[6] = abs(normalize_angle(out.heading - box.heading))
        worst = max(worst, d.max())
    assert worst < 1e-9


def test_heading_at_pi_round_trips():
    box = Box3D((0, 0, 5), (1.0, 2.0, 3.0), math.pi)
    out = decode_box(head_for(ANCHORS, *encode_box(box, ANCHORS, 0)), ANCHORS, box.center)
    assert abs(normalize_angle(out.heading - math.pi)) < 1e-12


def test_seg_forward_shape_and_range():
    det = small_detector()
    x = torch.randn(2, 40, 3, dtype=torch.float64)
    p = det.seg_forward(x, torch.eye(3, dtype=torch.float64)[[0, 1]])
    assert p.shape == (2, 40) and bool(((p > 0) & (p < 1)).all())


def test_seg_forward_permutation_equivariant():
    det = small_detector()
    x = torch.randn(40, 3, dtype=torch.float64)
    oh = torch.eye(3, dtype=torch.float64)[2]
    perm = torch.randperm(40)
    # per-row matmuls may differ in the last ulp depending on row position
    torch.testing.assert_close(det.seg_forward(x[perm], oh), det.seg_forward(x, oh)[perm], rtol=0, atol=1e-12)


def test_missing_onehot_raises():
    with pytest.raises(ValueError):
        small_detector().seg_forward(torch.randn(5, 3, dtype=torch.float64))


def test_without_onehot_outputs_ignore_class():
    det = small_detector(onehot=False)
    x = torch.randn(30, 3, dtype=torch.float64)
    eye = torch.eye(3, dtype=torch.float64)
    assert torch.equal(det.seg_forward(x, eye[0]), det.seg_forward(x, eye[2]))
    assert torch.equal(det.box_forward(x, eye[0]).raw, det.box_forward(x, eye[1]).raw)


def test_onehot_changes_outputs():
    det = small_detector(onehot=True, seed=4)
    x = torch.randn(30, 3, dtype=torch.float64)
    eye = torch.eye(3, dtype=torch.float64)
    assert not torch.equal(det.box_forward(x, eye[0]).raw, det.box_forward(x, eye[1]).raw)


def test_box_forward_shape_and_permutation_invariance():
    det = small_detector()
    x = torch.randn(4, 32, 3, dtype=torch.float64)
    oh = torch.eye(3, dtype=torch.float64)[[0, 1, 2, 0]]
    out = det.box_forward(x, oh)
    assert out.raw.shape == (4, ANCHORS.head_width)
    perm = torch.randperm(32)
    assert torch.equal(det.box_forward(x[:, perm], oh).raw, out.raw)


@settings(max_examples=20, deadline=None)
@given(st.tuples(*[st.floats(-20, 20)] * 3))
def test_box_forward_translation_covariant(t):
    det = small_detector(seed=1)
    x = torch.from_numpy(np.random.default_rng(2).normal(size=(32, 3)))
    oh = torch.eye(3, dtype=torch.float64)[1]
    a, _ = decode_params(det.box_forward(x, oh), ANCHORS)
    b, _ = decode_params(det.box_forward(x + torch.tensor(t, dtype=torch.float64), oh), ANCHORS)
    np.testing.assert_allclose((b - a)[:3].detach().numpy(), t, atol=1e-9)
    np.testing.assert_allclose((b - a)[3:].detach().numpy(), 0, atol=1e-9)


def test_seg_loss_values():
    mask = np.array([[True, False, True, False]])
    assert seg_loss(torch.tensor([[1.0, 0.0, 1.0, 0.0]], dtype=torch.float64), mask).item() < 1e-6
    half = torch.full((3, 4), 0.5, dtype=torch.float64)
    # averaged over points, summed over samples
    assert seg_loss(half, np.ones((3, 4), bool)).item() == pytest.approx(3 * math.log(2))


def test_mask_all_ones_and_all_zeros():
    x = torch.from_numpy(np.random.default_rng(0).normal(size=(256, 3)))
    for probs in (torch.ones(256), torch.zeros(256)):
        pts, c = mask_and_center(x, probs, count=256)
        np.testing.assert_allclose(c.numpy(), x.mean(0).numpy(), atol=1e-12)
        np.testing.assert_allclose(np.sort((pts + c).numpy(), 0), np.sort(x.numpy(), 0), atol=1e-12)


def test_mask_selects_and_centers():
    rng = np.random.default_rng(3)
    x = torch.from_numpy(rng.normal(size=(100, 3)))
    probs = torch.from_numpy(rng.uniform(size=100))
    pts, c = mask_and_center(x, probs, threshold=0.5, min_points=8, count=64)
    assert pts.shape == (64, 3)
    assert pts.mean(0).abs().max() < 1e-9
    keep = {tuple(r) for r in x[probs >= 0.5].numpy()}
    assert {tuple(r) for r in (pts + c).numpy().round(12)} <= {tuple(np.round(r, 12)) for r in keep}


def test_mask_blocks_gradient_to_probs():
    x = torch.randn(50, 3, dtype=torch.float64)
    probs = torch.rand(50, dtype=torch.float64, requires_grad=True)
    pts, c = mask_and_center(x, probs, count=16)
    assert not pts.requires_grad and not c.requires_grad


def test_mask_batched_matches_single():
    x = torch.randn(3, 60, 3, dtype=torch.float64)
    p = torch.rand(3, 60, dtype=torch.float64)
    pts, c = mask_and_center(x, p, count=32)
    for b in range(3):
        ps, cs = mask_and_center(x[b], p[b], count=32)
        assert torch.equal(ps, pts[b]) and torch.equal(cs, c[b])


def _exact_head(gt: Box3D, si: int):
    i, res, hb, hres = encode_box(gt, ANCHORS, si)
    raw = torch.from_numpy(head_for(ANCHORS, i, res, hb, hres, margin=60.0))[None]
    c = torch.tensor([gt.center], dtype=torch.float64)
    return split_head(raw, c, c, ANCHORS)


@settings(max_examples=30, deadline=None)
@given(boxes())
def test_exact_head_has_zero_loss(gt):
    si = 0
    gt = Box3D(gt.center, tuple(ANCHORS.sizes[si] * np.clip(np.array(gt.size) / 2, 0.6, 1.4)), gt.heading)
    terms = box_loss_terms(_exact_head(gt, si), torch.from_numpy(gt.to_vector()[None]), [si], ANCHORS)
    for k in ("c1_reg", "c2_reg", "r_reg", "s_reg", "corner"):
        assert terms[k].item() < 1e-12, k
    for k in ("r_cls", "s_cls"):
        assert terms[k].item() < 1e-20, k


@settings(max_examples=30, deadline=None)
@given(boxes())
def test_corner_loss_of_flipped_box_is_zero(gt):
    a = torch.tensor(gt.to_vector())[None]
    b = torch.tensor(gt.flipped().to_vector())[None]
    assert _corner_loss(b, a).item() < 1e-12
    assert _corner_loss(a, a).item() == 0.0


def _np_smooth_l1(d):
    d = np.abs(d)
    return np.where(d < 1, 0.5 * d * d, d - 0.5)


def _np_log_softmax(z):
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def test_sun_weighted_composition_on_fixture():
    """Recompute every term with numpy and the reference corner function."""
    assert SUN_BOX_WEIGHTS == {"c1_reg": 0.1, "c2_reg": 0.1, "r_cls": 0.1, "r_reg": 2.0, "s_cls": 0.1, "s_reg": 2.0,
                               "corner": 0.1}
    rng = np.random.default_rng(7)
    raw = rng.normal(0, 0.4, ANCHORS.head_width)
    centroid = np.array([0.3, -0.1, 5.0])
    tnet = centroid + np.array([0.1, 0.05, -0.2])
    gt = Box3D((0.5, 0.1, 5.3), (1.1, 1.8, 3.2), 1.0)
    si = 0
    out = split_head(torch.from_numpy(raw)[None], torch.from_numpy(centroid)[None], torch.from_numpy(tnet)[None],
                     ANCHORS)
    got = box_loss_strong(out, torch.from_numpy(gt.to_vector()[None]), [si], ANCHORS).item()

    ns, nh = ANCHORS.n_size, ANCHORS.n_heading
    bw = 2 * math.pi / nh
    hb = int((gt.heading + math.pi) // bw)
    gt_hres = (gt.heading - ((hb + 0.5) * bw - math.pi)) / (bw / 2)
    gt_sres = np.array(gt.size) / ANCHORS.sizes[si] - 1
    center = tnet + raw[:3]
    size_logits = raw[3:3 + ns]
    size_res = raw[3 + ns:3 + 4 * ns].reshape(ns, 3)
    head_logits = raw[3 + 4 * ns:3 + 4 * ns + nh]
    head_res = raw[3 + 4 * ns + nh:]
    pred = Box3D(tuple(center), tuple(ANCHORS.sizes[si] * (1 + size_res[si])),
                 normalize_angle((hb + 0.5) * bw - math.pi + head_res[hb] * math.pi / nh))
    corner = min(_np_smooth_l1(box_corners(pred) - box_corners(g)).sum() for g in (gt, gt.flipped()))
    terms = {
        "c1_reg": _np_smooth_l1(np.array(gt.center) - tnet).sum(),
        "c2_reg": _np_smooth_l1(np.array(gt.center) - center).sum(),
        "r_cls": -_np_log_softmax(head_logits)[hb],
        "r_reg": _np_smooth_l1(head_res[hb] - gt_hres),
        "s_cls": -_np_log_softmax(size_logits)[si],
        "s_reg": _np_smooth_l1(size_res[si] - gt_sres).sum(),
        "corner": corner,
    }
    want = sum(SUN_BOX_WEIGHTS[k] * v for k, v in terms.items())
    assert got == pytest.approx(want, rel=1e-12)


def test_detector_manifest_round_trip():
    det = small_detector()
    again = Detector.from_manifest(det.manifest())
    assert again.config == det.config
    np.testing.assert_array_equal(again.anchors.sizes, det.anchors.sizes)
