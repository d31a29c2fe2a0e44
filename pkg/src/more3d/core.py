"""Core value types and camera-frame operations.

Conventions used throughout the package:

- Pixel (row, col) maps to the continuous image coordinate (col + 0.5, row + 0.5).
- A camera pose (R, t) is world-from-camera: p_world = R @ p_cam + t, so the
  camera center expressed in world coordinates is t.
- Point maps are stored (H, W, 3); invalid pixels may hold arbitrary values and
  are masked by `valid`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

ROTATION_TOL = 1e-9


def _readonly(a: np.ndarray, dtype=np.float64) -> np.ndarray:
    out = np.array(a, dtype=dtype)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class PixelGrid:
    """Image raster dimensions."""

    width: int
    height: int

    def __post_init__(self):
        if self.width < 2 or self.height < 2:
            raise ValueError(f"grid must be at least 2x2, got {self.width}x{self.height}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics plus a world-from-camera pose."""

    k: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        k = _readonly(self.k)
        r = _readonly(self.rotation)
        t = _readonly(self.translation)
        if k.shape != (3, 3) or r.shape != (3, 3) or t.shape != (3,):
            raise ValueError("camera expects k (3,3), rotation (3,3), translation (3,)")
        if not (np.isfinite(k).all() and np.isfinite(r).all() and np.isfinite(t).all()):
            raise ValueError("camera parameters must be finite")
        if k[1, 0] != 0 or k[2, 0] != 0 or k[2, 1] != 0:
            raise ValueError("intrinsics must be upper triangular")
        if k[0, 0] <= 0 or k[1, 1] <= 0 or k[2, 2] <= 0:
            raise ValueError("focal entries must be positive")
        if np.abs(r @ r.T - np.eye(3)).max() > ROTATION_TOL or np.linalg.det(r) < 0:
            raise ValueError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return self.translation


@dataclass(frozen=True)
class PointMap:
    """Per-pixel 3D points with validity and confidence."""

    grid: PixelGrid
    points: np.ndarray
    valid: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        h, w = self.grid.shape
        pts = _readonly(self.points)
        val = _readonly(self.valid, dtype=bool)
        conf = _readonly(self.confidence)
        if pts.shape != (h, w, 3):
            raise ValueError(f"points shape {pts.shape} does not match grid {h}x{w}")
        if val.shape != (h, w) or conf.shape != (h, w):
            raise ValueError("valid and confidence must be (H, W)")
        if not np.isfinite(pts[val]).all():
            raise ValueError("valid points must be finite")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "valid", val)
        object.__setattr__(self, "confidence", conf)


@dataclass(frozen=True)
class NormalMap:
    """Per-pixel unit normals; invalid pixels are masked."""

    grid: PixelGrid
    normals: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        h, w = self.grid.shape
        nrm = _readonly(self.normals)
        val = _readonly(self.valid, dtype=bool)
        if nrm.shape != (h, w, 3) or val.shape != (h, w):
            raise ValueError("normals must be (H, W, 3) with (H, W) validity")
        if val.any():
            lengths = np.linalg.norm(nrm[val], axis=-1)
            if np.abs(lengths - 1.0).max() > 1e-6:
                raise ValueError("valid normals must have unit length")
        object.__setattr__(self, "normals", nrm)
        object.__setattr__(self, "valid", val)


@dataclass(frozen=True)
class CorrespondenceSet:
    """Pixel matches between the two views, (row, col) at subpixel precision."""

    ref_pixels: np.ndarray
    src_pixels: np.ndarray
    inlier: np.ndarray

    def __post_init__(self):
        rp = _readonly(self.ref_pixels)
        sp = _readonly(self.src_pixels)
        inl = _readonly(self.inlier, dtype=bool)
        if rp.ndim != 2 or rp.shape[1] != 2 or sp.shape != rp.shape or inl.shape != (rp.shape[0],):
            raise ValueError("matches expect ref (N,2), src (N,2), inlier (N,)")
        object.__setattr__(self, "ref_pixels", rp)
        object.__setattr__(self, "src_pixels", sp)
        object.__setattr__(self, "inlier", inl)

    def __len__(self) -> int:
        return self.ref_pixels.shape[0]


@dataclass(frozen=True)
class AffineAlignment:
    """Scale and shift mapping source points into the reference frame."""

    scale: float
    shift: np.ndarray

    def __post_init__(self):
        shift = _readonly(self.shift)
        if shift.shape != (3,) or not np.isfinite(shift).all():
            raise ValueError("shift must be a finite 3-vector")
        if not np.isfinite(self.scale) or self.scale <= 0:
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        object.__setattr__(self, "shift", shift)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * points + self.shift


@dataclass(frozen=True)
class ViewBundle:
    """One view: image, point map, camera, and (derived) normals."""

    image: np.ndarray
    pointmap: PointMap
    camera: CameraModel
    normals: Optional[NormalMap] = None

    def __post_init__(self):
        img = _readonly(self.image)
        h, w = self.pointmap.grid.shape
        if img.shape != (h, w, 3):
            raise ValueError(f"image shape {img.shape} does not match grid {h}x{w}")
        if self.normals is not None and self.normals.grid != self.pointmap.grid:
            raise ValueError("normal map grid differs from point map grid")
        object.__setattr__(self, "image", img)

    @property
    def grid(self) -> PixelGrid:
        return self.pointmap.grid


@dataclass(frozen=True)
class ScenePair:
    """Two views plus their correspondences."""

    ref: ViewBundle
    src: ViewBundle
    matches: CorrespondenceSet

    def __post_init__(self):
        for pix, grid, name in (
            (self.matches.ref_pixels, self.ref.grid, "ref"),
            (self.matches.src_pixels, self.src.grid, "src"),
        ):
            if len(pix) == 0:
                continue
            h, w = grid.shape
            if pix[:, 0].min() < -0.5 or pix[:, 0].max() > h - 0.5:
                raise ValueError(f"{name} match rows leave the grid")
            if pix[:, 1].min() < -0.5 or pix[:, 1].max() > w - 0.5:
                raise ValueError(f"{name} match cols leave the grid")


@dataclass(frozen=True)
class RansacConfig:
    """Inlier selection knobs. threshold=None picks the adaptive default
    (0.05 x median reference-camera depth of the matched points)."""

    threshold: Optional[float] = None
    max_iters: int = 500
    enabled: bool = True

    def __post_init__(self):
        if self.threshold is not None and self.threshold <= 0:
            raise ValueError("ransac threshold must be positive")
        if self.max_iters < 1:
            raise ValueError("ransac max_iters must be >= 1")


@dataclass(frozen=True)
class RefinementConfig:
    """Weights and schedule for graph-based refinement.

    Loss weights and sigmas follow the method defaults; the remaining knobs
    (knn_k, knn_refresh_every, patch_radius, neighbor_radius,
    confidence_threshold) control graph construction.
    """

    gamma: float = 0.5
    rho: float = 0.1
    sigma_int: float = 0.07
    sigma_spa: float = 3.0
    lambda_p: float = 30.0
    lambda_r: float = 50.0
    lambda_s: float = 0.1
    lambda_n: float = 10.0
    levels: int = 2
    iters_per_level: tuple[int, ...] = (50, 50)
    learning_rate: float = 5e-3
    knn_k: int = 3
    knn_refresh_every: int = 25
    patch_radius: int = 1
    neighbor_radius: int = 1
    confidence_threshold: float = 0.0
    ransac: RansacConfig = field(default_factory=RansacConfig)

    def __post_init__(self):
        if self.sigma_int <= 0 or self.sigma_spa <= 0:
            raise ValueError("sigma_int and sigma_spa must be positive")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        iters = tuple(int(i) for i in self.iters_per_level)
        if len(iters) != self.levels:
            raise ValueError("iters_per_level must list one count per level")
        if any(i < 0 for i in iters):
            raise ValueError("iteration counts must be non-negative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.knn_k < 1:
            raise ValueError("knn_k must be >= 1")
        if self.knn_refresh_every < 1:
            raise ValueError("knn_refresh_every must be >= 1")
        if self.patch_radius < 0 or self.neighbor_radius < 1:
            raise ValueError("patch_radius must be >= 0 and neighbor_radius >= 1")
        object.__setattr__(self, "iters_per_level", iters)

    @classmethod
    def from_dict(cls, raw: dict) -> "RefinementConfig":
        """Build from a plain dict (CLI config files). Unknown keys are errors."""
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(raw)
        if "ransac" in kwargs and isinstance(kwargs["ransac"], dict):
            rsub = kwargs["ransac"]
            rknown = {f.name for f in fields(RansacConfig)}
            runknown = set(rsub) - rknown
            if runknown:
                raise ValueError(f"unknown ransac config keys: {sorted(runknown)}")
            kwargs["ransac"] = RansacConfig(**rsub)
        if "iters_per_level" in kwargs:
            kwargs["iters_per_level"] = tuple(kwargs["iters_per_level"])
        return cls(**kwargs)


@dataclass(frozen=True)
class Ray:
    """World-frame viewing ray through a pixel."""

    origin: np.ndarray
    direction: np.ndarray


def transform_to_world(pointmap: PointMap, camera: CameraModel) -> PointMap:
    """Map a camera-frame point map into the world frame (R @ p + t)."""
    pts = pointmap.points
    world = pts @ camera.rotation.T + camera.translation
    # Invalid pixels keep whatever they held; only the mask gives them meaning.
    return PointMap(pointmap.grid, world, pointmap.valid, pointmap.confidence)


def camera_frame_points(points_world: np.ndarray, camera: CameraModel) -> np.ndarray:
    """Inverse pose: world points back into the camera frame."""
    return (points_world - camera.translation) @ camera.rotation


def pixel_directions(camera: CameraModel, grid: PixelGrid) -> np.ndarray:
    """Unit viewing directions in world coordinates for every pixel, (H, W, 3)."""
    h, w = grid.shape
    cols, rows = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    uv1 = np.stack([cols + 0.5, rows + 0.5, np.ones_like(cols)], axis=-1)
    dirs = np.linalg.solve(camera.k, uv1.reshape(-1, 3).T).T.reshape(h, w, 3)
    dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    return dirs @ camera.rotation.T


def viewing_ray(camera: CameraModel, pixel: tuple[float, float]) -> Ray:
    """Viewing ray for pixel (row, col).

    Direction is R @ normalize(K^-1 (col+0.5, row+0.5, 1)); the origin is the
    camera center in world coordinates. The ray passes through every point the
    pixel can unproject to.
    """
    row, col = pixel
    uv1 = np.array([col + 0.5, row + 0.5, 1.0])
    d = np.linalg.solve(camera.k, uv1)
    d = d / np.linalg.norm(d)
    return Ray(origin=camera.center, direction=camera.rotation @ d)
