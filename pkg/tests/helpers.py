"""Shared scene builders for the test suite."""

import numpy as np

from more3d import AffineAlignment, CameraModel, PixelGrid
from more3d.synth import Plane, SceneSpec, Sphere, generate


def exact_stereo_cameras(width, height, f=256.0, depth=4.0, disparity=8):
    """Fronto-parallel pair whose true matches land exactly on pixel centers.

    With identity rotations, a plane at z=depth, and baseline chosen so
    f*baseline/depth is an integer pixel count, every reference pixel center
    projects onto a source pixel center and the two views sample the same
    surface points bitwise.
    """
    k = np.array([[f, 0.0, width / 2.0], [0.0, f, height / 2.0], [0.0, 0.0, 1.0]])
    baseline = disparity * depth / f
    cam_ref = CameraModel(k, np.eye(3), np.zeros(3))
    cam_src = CameraModel(k, np.eye(3), np.array([baseline, 0.0, 0.0]))
    return cam_ref, cam_src


def exact_plane_scene(width=64, height=48, depth=4.0, scale=2.0,
                      shift=(0.3, -0.2, 0.5), noise_sigma=0.0,
                      outlier_fraction=0.0, seed=5, texture="checker"):
    cams = exact_stereo_cameras(width, height, depth=depth)
    spec = SceneSpec(
        surface=Plane(offset=depth),
        cameras=cams,
        grid=PixelGrid(width=width, height=height),
        noise_sigma=noise_sigma,
        affine_src=AffineAlignment(scale, np.asarray(shift, dtype=np.float64)),
        outlier_fraction=outlier_fraction,
        texture=texture,
        seed=seed,
    )
    return generate(spec)


def small_sphere_scene(width=8, height=6, noise_sigma=0.01, seed=11):
    """Tiny curved scene for gradient checks; uniform texture keeps the
    intensity weights well away from zero."""
    spec = SceneSpec(
        surface=Sphere(center=(0.0, 0.0, 2.0), radius=0.9),
        grid=PixelGrid(width=width, height=height),
        noise_sigma=noise_sigma,
        texture="uniform",
        seed=seed,
    )
    return generate(spec)
