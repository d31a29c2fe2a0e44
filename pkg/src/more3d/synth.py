"""Synthetic two-view scenes with exact ground truth.

Surfaces are ray-cast analytically, so every stored sample has a known true
world point. Per-view affine distortion emulates the scale/shift ambiguity of
monocular predictors: the stored camera-frame map is the camera-frame image of
alpha * P_world + beta. True matches come from projecting reference-view
surface points into the source view; injected outliers are uniformly random
pixel pairs, labeled in the ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import (
    AffineAlignment,
    CameraModel,
    CorrespondenceSet,
    PixelGrid,
    PointMap,
    ScenePair,
    ViewBundle,
    camera_frame_points,
    pixel_directions,
)
from .io import save_bundle

_RAY_EPS = 1e-12


@dataclass(frozen=True)
class Plane:
    """n . x = offset"""

    normal: tuple[float, float, float] = (0.0, 0.0, 1.0)
    offset: float = 2.0

    def raycast(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(np.abs(denom) > _RAY_EPS, (self.offset - origin @ n) / denom, np.inf)
        return np.where(t > _RAY_EPS, t, np.inf)


@dataclass(frozen=True)
class TwoPlanes:
    """Wedge of two half-planes folded about the line x=0, z=depth.

    dihedral_deg=180 degenerates to the flat plane z=depth.
    """

    dihedral_deg: float = 120.0
    depth: float = 2.0

    def raycast(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        tilt = np.deg2rad((180.0 - self.dihedral_deg) / 2.0)
        p0 = np.array([0.0, 0.0, self.depth])
        best = np.full(dirs.shape[:-1], np.inf)
        for sx in (-1.0, 1.0):
            # Half-plane on side sign(x)=sx, tilted toward the camera.
            n = np.array([-sx * np.sin(tilt), 0.0, -np.cos(tilt)])
            denom = dirs @ n
            with np.errstate(divide="ignore", invalid="ignore"):
                t = np.where(np.abs(denom) > _RAY_EPS, ((p0 - origin) @ n) / denom, np.inf)
            hit = origin + t[..., None] * dirs
            ok = (t > _RAY_EPS) & (sx * hit[..., 0] >= -1e-9)
            best = np.where(ok & (t < best), t, best)
        return best


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float] = (0.0, 0.0, 2.0)
    radius: float = 0.75

    def raycast(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        oc = origin - np.asarray(self.center, dtype=np.float64)
        b = dirs @ oc
        c = oc @ oc - self.radius**2
        disc = b * b - c
        sq = np.sqrt(np.maximum(disc, 0.0))
        t1 = -b - sq
        t2 = -b + sq
        t = np.where(t1 > _RAY_EPS, t1, t2)
        return np.where((disc >= 0) & (t > _RAY_EPS), t, np.inf)


@dataclass(frozen=True)
class Staircase:
    """Steps descending along +x; tread width equals the step height."""

    step: float = 0.25
    depth: float = 2.0
    n_steps: int = 32

    def raycast(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        w = self.step
        best = np.full(dirs.shape[:-1], np.inf)
        for k in range(-self.n_steps, self.n_steps + 1):
            zk = self.depth + k * self.step
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (zk - origin[2]) / dirs[..., 2]
            x = origin[0] + t * dirs[..., 0]
            ok = (t > _RAY_EPS) & (x >= k * w) & (x < (k + 1) * w)
            best = np.where(ok & (t < best), t, best)
            # Riser x = k*w between the adjacent treads.
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (k * w - origin[0]) / dirs[..., 0]
            z = origin[2] + t * dirs[..., 2]
            ok = (t > _RAY_EPS) & (z >= zk - self.step) & (z <= zk)
            best = np.where(ok & (t < best), t, best)
        return best


Surface = Plane | TwoPlanes | Sphere | Staircase

_SURFACE_TYPES = {
    "plane": Plane,
    "two_planes": TwoPlanes,
    "sphere": Sphere,
    "staircase": Staircase,
}


def default_cameras(grid: PixelGrid, depth: float = 2.0, baseline: float | None = None):
    """A forward-looking pair separated along +x, converged on the surface."""
    f = 0.8 * max(grid.width, grid.height)
    k = np.array([[f, 0.0, grid.width / 2.0], [0.0, f, grid.height / 2.0], [0.0, 0.0, 1.0]])
    if baseline is None:
        baseline = 0.15 * depth
    cam_ref = CameraModel(k, np.eye(3), np.zeros(3))
    # Slight convergent yaw so the views overlap around the optical axis.
    yaw = np.arctan2(baseline, 2.0 * depth)
    c, s = np.cos(yaw), np.sin(yaw)
    r = np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])
    cam_src = CameraModel(k, r, np.array([baseline, 0.0, 0.0]))
    return cam_ref, cam_src


@dataclass(frozen=True)
class SceneSpec:
    """Recipe for a synthetic two-view scene. Fully seeded."""

    surface: Surface = field(default_factory=Plane)
    cameras: Optional[tuple[CameraModel, CameraModel]] = None
    grid: PixelGrid = field(default_factory=lambda: PixelGrid(width=64, height=48))
    noise_sigma: float = 0.0
    affine_ref: AffineAlignment = field(default_factory=lambda: AffineAlignment(1.0, np.zeros(3)))
    affine_src: AffineAlignment = field(default_factory=lambda: AffineAlignment(1.0, np.zeros(3)))
    outlier_fraction: float = 0.0
    texture: str = "checker"
    texture_period_px: float = 8.0
    max_matches: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.outlier_fraction < 0.5:
            raise ValueError("outlier_fraction must be in [0, 0.5)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.texture not in ("checker", "uniform"):
            raise ValueError(f"unknown texture {self.texture!r}")


@dataclass(frozen=True)
class GroundTruth:
    """Per-view true world points plus the alignment the solver should find."""

    true_points_ref: np.ndarray
    true_points_src: np.ndarray
    true_valid_ref: np.ndarray
    true_valid_src: np.ndarray
    true_alpha: float
    true_beta: np.ndarray
    inlier_labels: np.ndarray
    affine_ref: AffineAlignment
    affine_src: AffineAlignment


def _render_view(spec: SceneSpec, cam: CameraModel):
    dirs = pixel_directions(cam, spec.grid)
    t = spec.surface.raycast(cam.center, dirs)
    valid = np.isfinite(t)
    t_safe = np.where(valid, t, 1.0)
    world = cam.center + t_safe[..., None] * dirs
    return world, valid


def _surface_depth(surface: Surface) -> float:
    if isinstance(surface, Plane):
        return float(surface.offset)
    if isinstance(surface, Sphere):
        return float(surface.center[2])
    return float(surface.depth)


def _albedo(spec: SceneSpec, world: np.ndarray, period_world: float) -> np.ndarray:
    if spec.texture == "uniform":
        return np.full(world.shape[:2] + (3,), 0.5)
    cells = np.floor(world / period_world).sum(axis=-1)
    parity = np.mod(cells, 2.0)[..., None]
    c0 = np.array([0.25, 0.35, 0.45])
    c1 = np.array([0.85, 0.75, 0.55])
    return np.where(parity < 0.5, c0, c1)


def _project(points: np.ndarray, cam: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """World points -> (row, col) pixel coordinates and positive-depth mask."""
    pc = camera_frame_points(points, cam)
    z = pc[..., 2]
    ok = z > _RAY_EPS
    z_safe = np.where(ok, z, 1.0)
    uv = (pc / z_safe[..., None]) @ cam.k.T
    rows = uv[..., 1] - 0.5
    cols = uv[..., 0] - 0.5
    return np.stack([rows, cols], axis=-1), ok


def generate(spec: SceneSpec) -> tuple[ScenePair, GroundTruth]:
    """Build the stored (distorted, noisy) pair and its ground truth."""
    rng = np.random.default_rng(spec.seed)
    cams = spec.cameras
    if cams is None:
        cams = default_cameras(spec.grid, depth=_surface_depth(spec.surface))

    worlds, valids, images = [], [], []
    for cam in cams:
        world, valid = _render_view(spec, cam)
        worlds.append(world)
        valids.append(valid)

    ref_depth = camera_frame_points(worlds[0], cams[0])[..., 2]
    med_depth = float(np.median(ref_depth[valids[0]])) if valids[0].any() else 1.0
    period_world = spec.texture_period_px * med_depth / cams[0].k[0, 0]
    for world in worlds:
        images.append(_albedo(spec, world, period_world))

    affines = (spec.affine_ref, spec.affine_src)
    stored = []
    for world, valid, cam, aff in zip(worlds, valids, cams, affines):
        distorted = aff.apply(world)
        pc = camera_frame_points(distorted, cam)
        if spec.noise_sigma > 0:
            pc = pc + rng.normal(0.0, spec.noise_sigma, size=pc.shape)
        pc = np.where(valid[..., None], pc, np.nan)
        stored.append(pc)

    matches, labels = _build_matches(spec, worlds, valids, cams, stored, rng)

    grid = spec.grid
    views = []
    for img, pc, valid, cam in zip(images, stored, valids, cams):
        pm = PointMap(grid, np.where(valid[..., None], pc, 0.0), valid,
                      valid.astype(np.float64))
        views.append(ViewBundle(image=img, pointmap=pm, camera=cam))

    corr = CorrespondenceSet(matches[:, 0:2], matches[:, 2:4],
                             np.ones(matches.shape[0], dtype=bool))
    pair = ScenePair(ref=views[0], src=views[1], matches=corr)

    a_r, a_s = spec.affine_ref, spec.affine_src
    true_alpha = a_r.scale / a_s.scale
    true_beta = a_r.shift - true_alpha * a_s.shift
    gt = GroundTruth(
        true_points_ref=worlds[0],
        true_points_src=worlds[1],
        true_valid_ref=valids[0],
        true_valid_src=valids[1],
        true_alpha=float(true_alpha),
        true_beta=true_beta,
        inlier_labels=labels,
        affine_ref=a_r,
        affine_src=a_s,
    )
    return pair, gt


def _build_matches(spec, worlds, valids, cams, stored, rng):
    h, w = spec.grid.shape
    ref_rows, ref_cols = np.nonzero(valids[0])
    proj, in_front = _project(worlds[0][ref_rows, ref_cols], cams[1])
    rr = np.rint(proj[:, 0]).astype(int)
    cc = np.rint(proj[:, 1]).astype(int)
    near = np.hypot(proj[:, 0] - rr, proj[:, 1] - cc) <= 0.5
    inside = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
    keep = in_front & inside & near
    keep[keep] &= valids[1][rr[keep], cc[keep]]

    true_matches = np.stack(
        [
            ref_rows[keep].astype(np.float64),
            ref_cols[keep].astype(np.float64),
            proj[keep, 0],
            proj[keep, 1],
        ],
        axis=1,
    )
    if spec.max_matches is not None and true_matches.shape[0] > spec.max_matches:
        pick = np.sort(rng.choice(true_matches.shape[0], spec.max_matches, replace=False))
        true_matches = true_matches[pick]

    n_true = true_matches.shape[0]
    f = spec.outlier_fraction
    n_out = int(np.floor(f * n_true / (1.0 - f))) if f > 0 else 0
    outliers = _sample_outliers(spec, stored, valids, cams, n_out, rng) if n_out else \
        np.empty((0, 4))

    matches = np.concatenate([true_matches, outliers], axis=0)
    labels = np.concatenate([np.ones(n_true, dtype=bool), np.zeros(n_out, dtype=bool)])
    order = rng.permutation(matches.shape[0])
    return matches[order], labels[order]


def _sample_outliers(spec, stored, valids, cams, n_out, rng):
    """Uniform random pixel pairs, rejection-sampled to sit clearly beyond the
    adaptive inlier threshold of the true alignment."""
    h, w = spec.grid.shape
    world_ref = stored_to_world(stored[0], cams[0])
    world_src = stored_to_world(stored[1], cams[1])
    a_r, a_s = spec.affine_ref, spec.affine_src
    alpha = a_r.scale / a_s.scale
    beta = a_r.shift - alpha * a_s.shift

    depths = camera_frame_points(world_ref[valids[0]], cams[0])[:, 2]
    margin = 1.5 * 0.05 * float(np.median(depths[depths > 0]))

    rows = []
    attempts = 0
    while len(rows) < n_out and attempts < 1000 * max(n_out, 1):
        attempts += 1
        ri, ci = int(rng.integers(0, h)), int(rng.integers(0, w))
        rj, cj = int(rng.integers(0, h)), int(rng.integers(0, w))
        if not (valids[0][ri, ci] and valids[1][rj, cj]):
            continue
        resid = np.linalg.norm(alpha * world_src[rj, cj] + beta - world_ref[ri, ci])
        if resid <= margin:
            continue
        rows.append([float(ri), float(ci), float(rj), float(cj)])
    if len(rows) < n_out:
        raise RuntimeError("could not sample enough gross outliers")
    return np.array(rows, dtype=np.float64)


def stored_to_world(stored_cam_points: np.ndarray, cam: CameraModel) -> np.ndarray:
    """Camera-frame stored map -> world frame (NaN rows pass through)."""
    return stored_cam_points @ cam.rotation.T + cam.translation


def write_bundle(spec: SceneSpec, path: str | Path) -> Path:
    """Generate a scene and write bundle files plus ground_truth.npz."""
    pair, gt = generate(spec)
    root = save_bundle(
        path,
        images=[pair.ref.image, pair.src.image],
        points=[
            np.where(pair.ref.pointmap.valid[..., None], pair.ref.pointmap.points, np.nan),
            np.where(pair.src.pointmap.valid[..., None], pair.src.pointmap.points, np.nan),
        ],
        confidences=[pair.ref.pointmap.confidence, pair.src.pointmap.confidence],
        cameras=[pair.ref.camera, pair.src.camera],
        matches=np.stack(
            [
                pair.matches.ref_pixels[:, 0],
                pair.matches.ref_pixels[:, 1],
                pair.matches.src_pixels[:, 0],
                pair.matches.src_pixels[:, 1],
            ],
            axis=1,
        ),
    )
    np.savez(
        root / "ground_truth.npz",
        true_points_ref=gt.true_points_ref.astype(np.float32),
        true_points_src=gt.true_points_src.astype(np.float32),
        true_valid_ref=gt.true_valid_ref,
        true_valid_src=gt.true_valid_src,
        true_alpha=np.float64(gt.true_alpha),
        true_beta=gt.true_beta.astype(np.float64),
        inlier_labels=gt.inlier_labels,
    )
    return root


def spec_from_dict(raw: dict) -> SceneSpec:
    """Build a SceneSpec from a JSON-style dict. Unknown keys are errors."""
    known = {
        "surface", "cameras", "grid", "noise_sigma", "affine_ref", "affine_src",
        "outlier_fraction", "texture", "texture_period_px", "max_matches", "seed",
    }
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown scene spec keys: {sorted(unknown)}")
    kwargs: dict = {}
    if "surface" in raw:
        sdict = dict(raw["surface"])
        stype = sdict.pop("type", None)
        if stype not in _SURFACE_TYPES:
            raise ValueError(f"unknown surface type {stype!r}")
        for key in ("normal", "center"):
            if key in sdict:
                sdict[key] = tuple(float(x) for x in sdict[key])
        kwargs["surface"] = _SURFACE_TYPES[stype](**sdict)
    if "grid" in raw:
        kwargs["grid"] = PixelGrid(width=int(raw["grid"]["width"]),
                                   height=int(raw["grid"]["height"]))
    if "cameras" in raw:
        cams = []
        for view in raw["cameras"]:
            cams.append(
                CameraModel(
                    np.array(view["intrinsics"], dtype=np.float64).reshape(3, 3),
                    np.array(view["rotation"], dtype=np.float64).reshape(3, 3),
                    np.array(view["translation"], dtype=np.float64).reshape(3),
                )
            )
        kwargs["cameras"] = (cams[0], cams[1])
    for key in ("affine_ref", "affine_src"):
        if key in raw:
            kwargs[key] = AffineAlignment(
                scale=float(raw[key]["scale"]),
                shift=np.array(raw[key]["shift"], dtype=np.float64),
            )
    for key in ("noise_sigma", "outlier_fraction", "texture_period_px"):
        if key in raw:
            kwargs[key] = float(raw[key])
    if "texture" in raw:
        kwargs["texture"] = str(raw["texture"])
    if "max_matches" in raw and raw["max_matches"] is not None:
        kwargs["max_matches"] = int(raw["max_matches"])
    if "seed" in raw:
        kwargs["seed"] = int(raw["seed"])
    return SceneSpec(**kwargs)
