"""Cross-view scale/shift alignment of monocular point maps.

The source view is mapped into the reference frame by one scale and one
3-vector shift, fit robustly: RANSAC proposes an inlier set, then an IRLS
solver minimizes the depth-weighted L1 objective

    sum_i (1/z_i) * |alpha * P_src_i + beta - P_ref_i|_1

over the inliers, where z_i is the reference-camera depth of the matched
reference point.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import (
    AffineAlignment,
    CorrespondenceSet,
    PointMap,
    RefinementConfig,
    ScenePair,
    ViewBundle,
    camera_frame_points,
    transform_to_world,
)
from .normals import normals_from_pointmap

IRLS_RESIDUAL_FLOOR = 1e-6
IRLS_MAX_ITERS = 100
IRLS_REL_TOL = 1e-10
ADAPTIVE_THRESHOLD_FACTOR = 0.05


class DegenerateMatchesError(RuntimeError):
    """Raised when matches cannot support a scale/shift fit."""


@dataclass(frozen=True)
class RansacReport:
    inlier_count: int
    threshold_used: float
    iterations_run: int


def _weighted_ls(src: np.ndarray, ref: np.ndarray, weights: np.ndarray) -> tuple[float, np.ndarray]:
    """Closed-form minimizer of sum_{i,d} W_id (alpha*s_id + beta_d - r_id)^2."""
    w_sum = weights.sum(axis=0)
    ws = (weights * src).sum(axis=0)
    wr = (weights * ref).sum(axis=0)
    a = np.zeros((4, 4))
    a[0, 0] = (weights * src * src).sum()
    a[0, 1:] = ws
    a[1:, 0] = ws
    a[1:, 1:] = np.diag(w_sum)
    b = np.empty(4)
    b[0] = (weights * src * ref).sum()
    b[1:] = wr

    mean = ws / np.maximum(w_sum, 1e-300)
    spread = (weights * (src - mean) ** 2).sum()
    if spread <= 1e-12 * max(1.0, a[0, 0]):
        raise DegenerateMatchesError("scale unobservable: source points nearly identical")
    try:
        x = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise DegenerateMatchesError(f"scale unobservable: {exc}") from exc
    return float(x[0]), x[1:]


def _l1_objective(src, ref, w, alpha, beta) -> float:
    return float((w[:, None] * np.abs(alpha * src + beta - ref)).sum())


def _weighted_median(values: np.ndarray, weights: np.ndarray) -> float:
    order = np.argsort(values, kind="stable")
    cum = np.cumsum(weights[order])
    return float(values[order][np.searchsorted(cum, 0.5 * cum[-1])])


def _profile_shift(src, ref, w, alpha):
    """Exact minimizing shift for a fixed scale, and the objective there.

    For fixed alpha the objective separates per coordinate into
    sum_i w_i |beta_d - (r_id - alpha*s_id)|, minimized by the weighted
    median.
    """
    v = ref - alpha * src
    beta = np.array([_weighted_median(v[:, d], w) for d in range(3)])
    obj = float((w[:, None] * np.abs(v - beta)).sum())
    return beta, obj


def _polish_profile(src, ref, w, alpha, beta, objective):
    """Refine the IRLS solution to the exact L1 minimizer.

    The residual floor in the IRLS reweighting keeps it slightly short of
    the true minimizer. Eliminating the shift exactly leaves a convex
    piecewise-linear profile in the scale alone, which a ternary search
    minimizes globally. The bracket is re-expanded if the minimum lands on
    an edge; the polished solution is kept only when it improves the
    objective, so the result never regresses.
    """
    lo, hi = 0.125 * alpha, 8.0 * alpha
    for _ in range(3):
        a_lo, a_hi = lo, hi
        for _ in range(160):
            m1 = a_lo + (a_hi - a_lo) / 3.0
            m2 = a_hi - (a_hi - a_lo) / 3.0
            if _profile_shift(src, ref, w, m1)[1] <= _profile_shift(src, ref, w, m2)[1]:
                a_hi = m2
            else:
                a_lo = m1
        a = 0.5 * (a_lo + a_hi)
        if a - lo > 1e-6 * (hi - lo) and hi - a > 1e-6 * (hi - lo):
            break
        lo, hi = 0.125 * lo, 8.0 * hi
    b, obj = _profile_shift(src, ref, w, a)
    if obj < objective and a > 0:
        return a, b, obj
    return alpha, beta, objective


def solve_scale_shift(
    ref_points: np.ndarray,
    src_points: np.ndarray,
    ref_depths: np.ndarray,
    return_info: bool = False,
):
    """Fit the depth-weighted L1 scale/shift mapping src onto ref.

    IRLS: initialize from weighted least squares, reweight each coordinate
    residual by 1/max(|r|, 1e-6), iterate to relative objective change below
    1e-10 (at most 100 iterations). The returned objective never exceeds the
    least-squares initialization; iterations that would increase it stop the
    loop at the best iterate. A final profile search (exact weighted-median
    shift per scale, ternary search on the convex scale profile) removes the
    bias the residual floor leaves and lands on the global minimizer.
    """
    ref = np.asarray(ref_points, dtype=np.float64)
    src = np.asarray(src_points, dtype=np.float64)
    z = np.asarray(ref_depths, dtype=np.float64)
    if ref.shape != src.shape or ref.ndim != 2 or ref.shape[1] != 3 or z.shape != (ref.shape[0],):
        raise ValueError("expected ref (N,3), src (N,3), depths (N,)")
    if ref.shape[0] < 3:
        raise DegenerateMatchesError(f"fewer than 3 matches ({ref.shape[0]})")
    if not np.isfinite(z).all() or (z <= 0).any():
        raise ValueError("reference depths must be positive and finite")

    w = 1.0 / z
    alpha, beta = _weighted_ls(src, ref, np.repeat(w[:, None], 3, axis=1))
    history = [_l1_objective(src, ref, w, alpha, beta)]

    for _ in range(IRLS_MAX_ITERS):
        resid = np.abs(alpha * src + beta - ref)
        weights = w[:, None] / np.maximum(resid, IRLS_RESIDUAL_FLOOR)
        try:
            alpha_new, beta_new = _weighted_ls(src, ref, weights)
        except DegenerateMatchesError:
            break
        obj = _l1_objective(src, ref, w, alpha_new, beta_new)
        if obj > history[-1]:
            break
        alpha, beta = alpha_new, beta_new
        prev = history[-1]
        history.append(obj)
        if abs(prev - obj) < IRLS_REL_TOL * max(prev, 1e-300):
            break

    alpha, beta, polished = _polish_profile(src, ref, w, alpha, beta, history[-1])
    if polished < history[-1]:
        history.append(polished)

    result = AffineAlignment(scale=alpha, shift=beta)
    if return_info:
        return result, {"objective_history": history, "objective": history[-1]}
    return result


def clamp_shift_iqr(depths: np.ndarray, shift: float) -> float:
    """Clamp a scalar depth shift to +-0.5 IQR of the finite depths."""
    vals = np.asarray(depths, dtype=np.float64).ravel()
    vals = vals[np.isfinite(vals)]
    if vals.size < 4:
        raise ValueError(f"IQR clamp needs at least 4 finite depths, got {vals.size}")
    q25, q75 = np.percentile(vals, [25.0, 75.0])
    bound = 0.5 * (q75 - q25)
    return float(np.clip(shift, -bound, bound))


def apply_alignment(pointmap: PointMap, alignment: AffineAlignment) -> PointMap:
    """Scale and shift every valid point; validity and confidence unchanged."""
    pts = alignment.apply(pointmap.points)
    return PointMap(pointmap.grid, pts, pointmap.valid, pointmap.confidence)


def _rounded_pixels(pixels: np.ndarray, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    rows = np.clip(np.rint(pixels[:, 0]).astype(int), 0, shape[0] - 1)
    cols = np.clip(np.rint(pixels[:, 1]).astype(int), 0, shape[1] - 1)
    return rows, cols


def match_points(pair: ScenePair) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gather matched 3D points (ref, src) and a usability mask.

    A match is usable when both rounded endpoints land on valid pixels.
    """
    rr, rc = _rounded_pixels(pair.matches.ref_pixels, pair.ref.grid.shape)
    sr, sc = _rounded_pixels(pair.matches.src_pixels, pair.src.grid.shape)
    usable = pair.ref.pointmap.valid[rr, rc] & pair.src.pointmap.valid[sr, sc]
    return pair.ref.pointmap.points[rr, rc], pair.src.pointmap.points[sr, sc], usable


def adaptive_threshold(pair: ScenePair, ref_pts: np.ndarray, usable: np.ndarray) -> float:
    depths = camera_frame_points(ref_pts[usable], pair.ref.camera)[:, 2]
    depths = depths[depths > 0]
    if depths.size == 0:
        raise DegenerateMatchesError("no matched points in front of the reference camera")
    return ADAPTIVE_THRESHOLD_FACTOR * float(np.median(depths))


def filter_matches_ransac(
    pair: ScenePair, cfg: RefinementConfig, seed: int = 0
) -> tuple[CorrespondenceSet, RansacReport]:
    """Select scale/shift-consistent matches by RANSAC on minimal 3-samples.

    Expects world-frame point maps. Residual for a candidate (alpha, beta) is
    the 3D distance |alpha*P_src + beta - P_ref|; matches under the threshold
    are inliers. Seeded and deterministic.
    """
    n = len(pair.matches)
    if n < 3:
        raise DegenerateMatchesError(f"fewer than 3 matches ({n})")
    ref_pts, src_pts, usable = match_points(pair)
    idx = np.flatnonzero(usable)
    if idx.size < 3:
        raise DegenerateMatchesError(f"fewer than 3 matches on valid pixels ({idx.size})")

    threshold = cfg.ransac.threshold
    if threshold is None:
        threshold = adaptive_threshold(pair, ref_pts, usable)

    rp = ref_pts[idx]
    sp = src_pts[idx]
    rng = np.random.default_rng(seed)
    ones = np.ones((3, 3))
    best_count = 0
    best_model: Optional[tuple[float, np.ndarray]] = None
    iterations = 0
    for _ in range(cfg.ransac.max_iters):
        iterations += 1
        pick = rng.choice(idx.size, size=3, replace=False)
        try:
            alpha, beta = _weighted_ls(sp[pick], rp[pick], ones)
        except DegenerateMatchesError:
            continue
        if alpha <= 0 or not np.isfinite(alpha) or not np.isfinite(beta).all():
            continue
        resid = np.linalg.norm(alpha * sp + beta - rp, axis=1)
        count = int((resid < threshold).sum())
        if count > best_count:
            best_count = count
            best_model = (alpha, beta)

    if best_model is None or best_count == 0:
        raise DegenerateMatchesError(
            "RANSAC found no inliers; increase the ransac threshold"
        )

    alpha, beta = best_model
    resid = np.linalg.norm(alpha * sp + beta - rp, axis=1)
    inlier = np.zeros(n, dtype=bool)
    inlier[idx] = resid < threshold
    out = CorrespondenceSet(pair.matches.ref_pixels, pair.matches.src_pixels, inlier)
    report = RansacReport(
        inlier_count=int(inlier.sum()),
        threshold_used=float(threshold),
        iterations_run=iterations,
    )
    return out, report


def prepare_world_pair(pair: ScenePair) -> ScenePair:
    """Camera-frame bundle -> world-frame points with derived normals."""
    views = []
    for view in (pair.ref, pair.src):
        world = transform_to_world(view.pointmap, view.camera)
        nrm = normals_from_pointmap(world, view.camera)
        views.append(ViewBundle(view.image, world, view.camera, nrm))
    return ScenePair(ref=views[0], src=views[1], matches=pair.matches)


@dataclass(frozen=True)
class AlignmentInfo:
    """Solve diagnostics: matches used and L1 objective before/after IRLS."""

    n_used: int
    objective_initial: float
    objective_final: float


def align_scene(
    pair: ScenePair, cfg: RefinementConfig, seed: int = 0
) -> tuple[ScenePair, AffineAlignment, Optional[RansacReport], AlignmentInfo]:
    """Full alignment pass on a world-frame pair.

    Runs RANSAC when enabled, solves scale/shift on the inliers with
    depth weights from the reference camera, and returns the pair with the
    source map aligned plus the kept matches.
    """
    report = None
    matches = pair.matches
    if cfg.ransac.enabled:
        matches, report = filter_matches_ransac(pair, cfg, seed=seed)
        pair = ScenePair(pair.ref, pair.src, matches)

    ref_pts, src_pts, usable = match_points(pair)
    keep = usable & matches.inlier
    if keep.sum() < 3:
        raise DegenerateMatchesError(f"fewer than 3 usable inlier matches ({int(keep.sum())})")
    depths = camera_frame_points(ref_pts[keep], pair.ref.camera)[:, 2]
    if (depths <= 0).any():
        raise DegenerateMatchesError("matched reference points behind the camera")
    alignment, solve_info = solve_scale_shift(
        ref_pts[keep], src_pts[keep], depths, return_info=True
    )
    info = AlignmentInfo(
        n_used=int(keep.sum()),
        objective_initial=solve_info["objective_history"][0],
        objective_final=solve_info["objective"],
    )

    aligned_src_map = apply_alignment(pair.src.pointmap, alignment)
    src_normals = normals_from_pointmap(aligned_src_map, pair.src.camera)
    src_view = ViewBundle(pair.src.image, aligned_src_map, pair.src.camera, src_normals)
    kept = CorrespondenceSet(matches.ref_pixels, matches.src_pixels, keep)
    return ScenePair(pair.ref, src_view, kept), alignment, report, info
