"""Depth and point-cloud evaluation.

Depth is the camera-frame z of a point; pixels where either prediction or
ground truth is missing or non-positive are skipped. The inlier ratio uses a
strict max-ratio threshold (default 1.03: a ratio of exactly 1.03 is an
outlier).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import CameraModel, camera_frame_points
from . import runtime

TAU_THRESHOLD = 1.03


@dataclass(frozen=True)
class DepthEvalResult:
    abs_rel: float
    inlier_ratio: float
    n_evaluated: int
    scale_applied: float


@dataclass(frozen=True)
class CloudEval:
    accuracy: float
    completeness: float
    overall: float


def depth_from_points(points_world: np.ndarray, camera: CameraModel) -> np.ndarray:
    """Per-pixel depth of world-frame points: camera-frame z, NaN where the
    point is behind the camera or not finite."""
    z = camera_frame_points(np.asarray(points_world, dtype=np.float64), camera)[..., 2]
    return np.where(np.isfinite(z) & (z > 0), z, np.nan)


def _usable(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    return np.isfinite(pred) & np.isfinite(gt) & (pred > 0) & (gt > 0)


def median_scale(pred: np.ndarray, gt: np.ndarray) -> float:
    """Factor aligning the prediction's median depth to the ground truth's."""
    mask = _usable(pred, gt)
    if not mask.any():
        raise ValueError("no overlapping valid depths")
    med_pred = np.median(pred[mask])
    if med_pred <= 0:
        raise ValueError("median predicted depth is not positive")
    return float(np.median(gt[mask]) / med_pred)


def eval_depth(
    pred: np.ndarray,
    gt: np.ndarray,
    threshold: float = TAU_THRESHOLD,
    median_scaling: bool = False,
) -> DepthEvalResult:
    """Mean absolute relative error and strict inlier ratio on the overlap."""
    mask = _usable(pred, gt)
    if not mask.any():
        raise ValueError("no overlapping valid depths")
    p = pred[mask].astype(np.float64)
    g = gt[mask].astype(np.float64)
    scale = 1.0
    if median_scaling:
        scale = float(np.median(g) / np.median(p))
        p = p * scale
    abs_rel = float(np.mean(np.abs(p - g) / g))
    ratio = np.maximum(p / g, g / p)
    tau = float(np.mean(ratio < threshold))
    return DepthEvalResult(
        abs_rel=abs_rel, inlier_ratio=tau, n_evaluated=int(mask.sum()), scale_applied=scale
    )


def eval_pointcloud(pred: np.ndarray, gt: np.ndarray) -> CloudEval:
    """Mean nearest-neighbor distances between two point sets.

    accuracy: predicted point to nearest ground-truth point;
    completeness: ground-truth point to nearest prediction;
    overall: mean of the two.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    pred = pred[np.isfinite(pred).all(axis=1)]
    gt = gt[np.isfinite(gt).all(axis=1)]
    if pred.shape[0] == 0 or gt.shape[0] == 0:
        raise ValueError("both point sets must be non-empty")
    workers = runtime.get_threads()
    acc = float(cKDTree(gt).query(pred, k=1, workers=workers)[0].mean())
    comp = float(cKDTree(pred).query(gt, k=1, workers=workers)[0].mean())
    return CloudEval(accuracy=acc, completeness=comp, overall=0.5 * (acc + comp))
