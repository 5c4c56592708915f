import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cs3d.geometry import (BehindCameraError, Box2D, Box3D, Camera, GeometryError, box_corners,
                           clip_convex, footprint, iou3d, iou3d_batch, iou3d_upper_bound, normalize_angle,
                           plane_features_t, point_plane_features, points_in_box, polygon_area,
                           project_box_to_image, project_params_t, rotate_box_y, rotate_params_y_t,
                           rotate_points_y)

from conftest import boxes, fd_check, random_box, random_params

UNIT = Box3D((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), 0.0)


def to_local(points, box: Box3D):
    """Independent world -> box-frame transform with an explicit rotation matrix."""
    c, s = math.cos(box.heading), math.sin(box.heading)
    rot = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return (np.asarray(points) - np.asarray(box.center)) @ rot  # R^T row-wise


def inside_oracle(points, box: Box3D):
    q = to_local(points, box)
    h, w, l = box.size
    return (np.abs(q[:, 0]) <= l / 2) & (np.abs(q[:, 1]) <= h / 2) & (np.abs(q[:, 2]) <= w / 2)


def monte_carlo_iou(a: Box3D, b: Box3D, n: int, rng) -> float:
    pts = np.concatenate([box_corners(a), box_corners(b)])
    lo, hi = pts.min(0), pts.max(0)
    x = rng.uniform(lo, hi, (n, 3))
    ia, ib = inside_oracle(x, a), inside_oracle(x, b)
    union = (ia | ib).sum()
    return float((ia & ib).sum() / union) if union else 0.0


# -- types -------------------------------------------------------------------------

def test_box3d_rejects_nonpositive_size():
    with pytest.raises(ValueError):
        Box3D((0, 0, 0), (1, 0, 1), 0.0)


def test_box3d_heading_normalized():
    assert Box3D((0, 0, 0), (1, 1, 1), 3 * math.pi).heading == pytest.approx(math.pi)
    assert Box3D((0, 0, 0), (1, 1, 1), -math.pi).heading == pytest.approx(math.pi)


@given(st.floats(-50, 50, allow_nan=False))
def test_normalize_angle_range(a):
    v = normalize_angle(a)
    assert -math.pi < v <= math.pi
    assert math.isclose(math.cos(v), math.cos(a), abs_tol=1e-9)
    assert math.isclose(math.sin(v), math.sin(a), abs_tol=1e-9)


def test_box2d_and_camera_invariants():
    with pytest.raises(ValueError):
        Box2D(10, 0, 5, 1)
    with pytest.raises(GeometryError):
        Camera(0.0, 1.0, 0, 0, 10, 10)
    with pytest.raises(GeometryError):
        Camera(1.0, 1.0, 20, 5, 10, 10)


# -- corners -----------------------------------------------------------------------

def test_unit_cube_corners_are_sign_combinations():
    got = {tuple(np.round(c, 12)) for c in box_corners(UNIT)}
    assert got == set(itertools.product((-0.5, 0.5), repeat=3))


def test_cube_rotated_by_pi_has_same_corner_set():
    a = {tuple(np.round(c, 9) + 0.0) for c in box_corners(UNIT)}
    b = {tuple(np.round(c, 9) + 0.0) for c in box_corners(Box3D((0, 0, 0), (1, 1, 1), math.pi))}
    assert a == b


def test_corners_match_explicit_rotation():
    box = Box3D((1.0, 2.0, 3.0), (2.0, 4.0, 6.0), math.pi / 2)
    h, w, l = box.size
    rot = np.array([[0.0, 0, 1], [0, 1, 0], [-1, 0, 0]])  # R_y(pi/2) written out
    expect = [np.array(box.center) + rot @ np.array([sx * l / 2, sy * h / 2, sz * w / 2])
              for sy in (-1, 1) for sx, sz in ((1, 1), (-1, 1), (-1, -1), (1, -1))]
    np.testing.assert_allclose(box_corners(box), np.array(expect), atol=1e-12)


def test_corner_order_top_then_bottom_ccw_from_above():
    box = Box3D((0, 0, 0), (1.0, 2.0, 3.0), 0.4)
    c = box_corners(box)
    assert np.all(c[:4, 1] < c[4:, 1])  # y points down: top has the smaller y
    for ring in (c[:4], c[4:]):
        x, z = ring[:, 0], ring[:, 2]
        # viewed from above (-y) with x right and z up the page
        area = 0.5 * np.sum(x * np.roll(z, -1) - np.roll(x, -1) * z)
        assert area > 0


@settings(max_examples=200, deadline=None)
@given(boxes())
def test_each_corner_lies_on_three_faces(box):
    f = point_plane_features(box_corners(box), box)
    assert np.all((np.abs(f) < 1e-9).sum(1) >= 3)


# -- IoU ---------------------------------------------------------------------------

def test_iou_identical_is_one():
    assert iou3d(UNIT, UNIT) == pytest.approx(1.0, abs=1e-12)


def test_iou_half_offset_is_one_third():
    b = Box3D((0.5, 0.0, 0.0), (1, 1, 1), 0.0)
    assert iou3d(UNIT, b) == pytest.approx(1 / 3, abs=1e-12)


def test_iou_45_degree_rotation():
    b = Box3D((0, 0, 0), (1, 1, 1), math.pi / 4)
    octagon = 2 * (math.sqrt(2) - 1)
    assert iou3d(UNIT, b) == pytest.approx(octagon / (2 - octagon), abs=1e-9)
    assert iou3d(UNIT, b) == pytest.approx(monte_carlo_iou(UNIT, b, 10 ** 6, np.random.default_rng(0)), abs=0.01)


def test_iou_disjoint_and_vertical_separation_is_zero():
    assert iou3d(UNIT, Box3D((5, 0, 0), (1, 1, 1), 0.3)) == 0.0
    assert iou3d(UNIT, Box3D((0, 2, 0), (1, 1, 1), 0.0)) == 0.0


def test_iou_matches_monte_carlo_small_sample():
    rng = np.random.default_rng(7)
    for _ in range(10):
        a = random_box(rng, 0.5)
        b = random_box(rng, 0.5)
        assert abs(iou3d(a, b) - monte_carlo_iou(a, b, 200_000, rng)) < 0.01


@settings(max_examples=300, deadline=None)
@given(boxes(), boxes())
def test_iou_symmetric_and_bounded(a, b):
    v = iou3d(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou3d(b, a), abs=1e-12)
    assert iou3d(a, a) == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(boxes(), boxes(), st.floats(-math.pi, math.pi), st.tuples(*[st.floats(-10, 10)] * 3))
def test_iou_invariant_under_joint_rigid_motion(a, b, angle, shift):
    def move(box):
        r = rotate_box_y(box, angle)
        return Box3D(tuple(np.asarray(r.center) + shift), r.size, r.heading)

    assert abs(iou3d(move(a), move(b)) - iou3d(a, b)) < 1e-9


@settings(max_examples=200, deadline=None)
@given(boxes(1.0), boxes(1.0))
def test_batched_iou_and_upper_bound_agree_with_scalar(a, b):
    pa, pb = a.to_vector()[None], b.to_vector()[None]
    exact = iou3d(a, b)
    assert iou3d_batch(pa, pb)[0] == pytest.approx(exact, abs=1e-9)
    assert iou3d_upper_bound(pa, pb)[0] >= exact - 1e-12


def test_clip_convex_square_against_shifted_square():
    sq = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    out = clip_convex(sq, sq + 0.5)
    assert polygon_area(out) == pytest.approx(0.25)
    assert polygon_area(footprint(UNIT)) == pytest.approx(1.0)


# -- plane features and inside test -----------------------------------------------

def test_plane_features_at_center_are_half_extents():
    np.testing.assert_allclose(point_plane_features(np.zeros((1, 3)), UNIT), 0.5 * np.ones((1, 6)))


def test_point_on_top_face():
    f = point_plane_features(np.array([[0.1, -0.5, 0.2]]), UNIT)[0]
    assert f[0] == pytest.approx(0.0, abs=1e-12)
    assert np.all(f[1:] > 0)


def test_plane_features_match_plane_equations(rng):
    for _ in range(20):
        box = random_box(rng)
        pts = rng.normal(0, 3, (50, 3))
        h, w, l = box.size
        c, s = math.cos(box.heading), math.sin(box.heading)
        ex, ey, ez = np.array([c, 0, -s]), np.array([0, 1.0, 0]), np.array([s, 0, c])  # box axes in world
        d = pts - np.asarray(box.center)
        # inward normal n and offset so that feature = n . (p - c) + half-extent
        expect = np.stack([d @ ey + h / 2, -d @ ey + h / 2, -d @ ez + w / 2,
                           d @ ez + w / 2, -d @ ex + l / 2, d @ ex + l / 2], 1)
        np.testing.assert_allclose(point_plane_features(pts, box), expect, atol=1e-12)


def test_points_in_box_examples_and_sign_agreement(rng):
    box = Box3D((1.0, 0.5, 4.0), (1.5, 2.0, 3.0), 0.7)
    diag = np.linalg.norm(box.size)
    assert points_in_box(np.array([box.center]), box)[0]
    assert not points_in_box(np.array(box.center) + np.array([[10 * diag, 0, 0]]), box)[0]
    pts = np.asarray(box.center) + rng.uniform(-2.5, 2.5, (1000, 3))
    np.testing.assert_array_equal(points_in_box(pts, box), point_plane_features(pts, box).min(1) >= 0)
    np.testing.assert_array_equal(points_in_box(pts, box), inside_oracle(pts, box))


# -- projection --------------------------------------------------------------------

def test_unit_cube_projection():
    cam = Camera(1.0, 1.0, 0.0, 0.0, 1, 1)
    b = project_box_to_image(Box3D((0, 0, 5), (1, 1, 1), 0.0), cam)
    np.testing.assert_allclose(b.as_array(), [-1 / 9, -1 / 9, 1 / 9, 1 / 9], atol=1e-12)


def test_projection_symmetric_on_optical_axis(camera):
    b = project_box_to_image(Box3D((0, 0, 8), (1.2, 0.8, 2.0), 0.0), camera)
    assert (b.left + b.right) / 2 == pytest.approx(camera.cx)
    assert (b.top + b.bottom) / 2 == pytest.approx(camera.cy)


def test_projection_shift_with_translation(camera):
    box = Box3D((0.8, 0.1, 6.0), (1.0, 1.0, 1.0), 0.0)
    moved = Box3D((1.3, 0.1, 6.0), (1.0, 1.0, 1.0), 0.0)
    a, b = project_box_to_image(box, camera), project_box_to_image(moved, camera)
    # right edge comes from the near face at z = 5.5 once the box is right of the axis
    assert b.right - a.right == pytest.approx(camera.fx * 0.5 / 5.5, rel=1e-12)
    # left edge sits on the far face (z = 6.5) for both, as both left faces are right of the axis
    assert b.left - a.left == pytest.approx(camera.fx * 0.5 / 6.5, rel=1e-12)


def test_projection_not_clipped_to_image(camera):
    b = project_box_to_image(Box3D((30, 0, 5), (1, 1, 1), 0.0), camera)
    assert b.left > camera.width


def test_behind_camera_raises(camera):
    with pytest.raises(BehindCameraError):
        project_box_to_image(Box3D((0, 0, 0.3), (1, 1, 1), 0.0), camera)


# -- frame rotation ------------------------------------------------------------------

def test_rotate_points_and_box_round_trip(rng):
    box = random_box(rng)
    pts = rng.normal(size=(20, 3))
    angle = 0.37
    back = rotate_box_y(rotate_box_y(box, -angle), angle)
    np.testing.assert_allclose(back.to_vector(), box.to_vector(), atol=1e-12)
    np.testing.assert_allclose(rotate_points_y(rotate_points_y(pts, angle), -angle), pts, atol=1e-12)
    inside = points_in_box(pts, box)
    np.testing.assert_array_equal(points_in_box(rotate_points_y(pts, angle), rotate_box_y(box, angle)), inside)


def test_rotate_params_matches_numpy(rng):
    box = random_box(rng)
    got = rotate_params_y_t(torch.from_numpy(box.to_vector()), 0.8).numpy()
    want = rotate_box_y(box, 0.8)
    np.testing.assert_allclose(got[:6], want.to_vector()[:6], atol=1e-12)
    assert normalize_angle(got[6]) == pytest.approx(want.heading, abs=1e-12)


# -- gradients -----------------------------------------------------------------------

def test_plane_feature_gradients_box_and_points(rng):
    params = torch.from_numpy(random_params(rng))
    pts = torch.from_numpy(params.numpy()[:3] + rng.normal(0, 1, (12, 3)))
    fd_check(lambda p: plane_features_t(pts, p), params, n_samples=7)
    fd_check(lambda x: plane_features_t(x, params), pts, n_samples=20)


def test_projection_gradients(rng, camera):
    for _ in range(3):
        params = torch.from_numpy(random_params(rng))
        fd_check(lambda p: project_params_t(p, camera), params, n_samples=7)
