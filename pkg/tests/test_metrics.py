"""Evaluation metrics against hand-computed values."""

import numpy as np
import pytest

from more3d import (
    CameraModel,
    depth_from_points,
    eval_depth,
    eval_pointcloud,
    median_scale,
)
from more3d.metrics import TAU_THRESHOLD


def tilted_camera():
    c, s = np.cos(0.3), np.sin(0.3)
    r = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    k = np.array([[10.0, 0.0, 4.0], [0.0, 10.0, 3.0], [0.0, 0.0, 1.0]])
    return CameraModel(k, r, np.array([0.2, -0.1, 0.4]))


def test_depth_from_points_is_camera_frame_z():
    cam = tilted_camera()
    rng = np.random.default_rng(9)
    pts_cam = rng.uniform(0.5, 3.0, (5, 4, 3))
    pts_world = pts_cam @ cam.rotation.T + cam.translation
    depth = depth_from_points(pts_world, cam)
    np.testing.assert_allclose(depth, pts_cam[..., 2], rtol=1e-12)


def test_depth_from_points_masks_behind_and_nonfinite():
    cam = CameraModel(np.eye(3) * [2.0, 2.0, 1.0], np.eye(3), np.zeros(3))
    pts = np.array([
        [0.0, 0.0, 2.0],
        [0.0, 0.0, -1.0],
        [0.0, 0.0, 0.0],
        [np.nan, 0.0, 1.0],
    ])
    depth = depth_from_points(pts, cam)
    assert depth[0] == 2.0
    assert np.isnan(depth[1:]).all()


def test_median_scale_hand_case():
    pred = np.array([1.0, 2.0, 3.0, np.nan])
    gt = np.array([2.0, 4.0, 6.0, 1.0])
    # medians over the 3 overlapping pixels: 2.0 vs 4.0
    assert median_scale(pred, gt) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        median_scale(np.array([np.nan]), np.array([1.0]))
    with pytest.raises(ValueError):
        median_scale(np.array([-1.0, 0.0]), np.array([1.0, 1.0]))


def test_eval_depth_hand_case():
    gt = np.array([1.0, 2.0, 4.0])
    pred = np.array([1.1, 2.0, 3.0])
    res = eval_depth(pred, gt)
    want_abs_rel = (0.1 / 1.0 + 0.0 + 1.0 / 4.0) / 3.0
    assert res.abs_rel == pytest.approx(want_abs_rel, rel=1e-12)
    # ratios 1.1, 1.0, 4/3: only the exact match is under 1.03
    assert res.inlier_ratio == pytest.approx(1.0 / 3.0)
    assert res.n_evaluated == 3
    assert res.scale_applied == 1.0


def test_eval_depth_threshold_is_strict():
    gt = np.ones(4)
    pred = np.array([1.03, 1.0 / 1.03, 1.029999, 1.0])
    res = eval_depth(pred, gt)
    # max-ratio exactly at the threshold counts as an outlier on both sides
    assert res.inlier_ratio == pytest.approx(0.5)
    assert TAU_THRESHOLD == 1.03


def test_eval_depth_median_scaling_removes_global_scale():
    rng = np.random.default_rng(2)
    gt = rng.uniform(1.0, 5.0, 40)
    res = eval_depth(1.05 * gt, gt)
    assert res.abs_rel == pytest.approx(0.05, abs=1e-12)
    assert res.inlier_ratio == 0.0
    scaled = eval_depth(1.05 * gt, gt, median_scaling=True)
    assert scaled.abs_rel == pytest.approx(0.0, abs=1e-12)
    assert scaled.inlier_ratio == 1.0
    assert scaled.scale_applied == pytest.approx(1.0 / 1.05, rel=1e-12)


def test_eval_depth_skips_nonpositive_and_nan():
    gt = np.array([[1.0, -1.0], [np.nan, 2.0]])
    pred = np.array([[2.0, 1.0], [1.0, np.nan]])
    res = eval_depth(pred, gt)
    assert res.n_evaluated == 1
    assert res.abs_rel == pytest.approx(1.0)
    with pytest.raises(ValueError):
        eval_depth(np.array([np.nan]), np.array([1.0]))


def test_eval_pointcloud_hand_asymmetric():
    pred = np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]])
    gt = np.array([[1.0, 0.0, 0.0]])
    res = eval_pointcloud(pred, gt)
    assert res.accuracy == pytest.approx((1.0 + 9.0) / 2.0)
    assert res.completeness == pytest.approx(1.0)
    assert res.overall == pytest.approx(0.5 * (5.0 + 1.0))


def brute_cloud(pred, gt):
    d = np.linalg.norm(pred[:, None, :] - gt[None, :, :], axis=2)
    return d.min(axis=1).mean(), d.min(axis=0).mean()


def test_eval_pointcloud_matches_brute_force():
    rng = np.random.default_rng(14)
    pred = rng.normal(0.0, 1.0, (80, 3))
    gt = rng.normal(0.1, 1.1, (60, 3))
    res = eval_pointcloud(pred, gt)
    acc, comp = brute_cloud(pred, gt)
    assert res.accuracy == pytest.approx(acc, rel=1e-12)
    assert res.completeness == pytest.approx(comp, rel=1e-12)
    assert res.overall == pytest.approx(0.5 * (acc + comp), rel=1e-12)
    # swapping the sets swaps the roles
    swapped = eval_pointcloud(gt, pred)
    assert swapped.accuracy == pytest.approx(res.completeness, rel=1e-12)
    assert swapped.completeness == pytest.approx(res.accuracy, rel=1e-12)


def test_eval_pointcloud_drops_nonfinite_rows():
    pred = np.array([[0.0, 0.0, 0.0], [np.nan, 0.0, 0.0]])
    gt = np.array([[0.0, 0.0, 1.0]])
    res = eval_pointcloud(pred, gt)
    assert res.accuracy == pytest.approx(1.0)
    with pytest.raises(ValueError):
        eval_pointcloud(np.full((2, 3), np.nan), gt)
