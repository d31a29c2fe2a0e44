"""Synthetic scene generator: determinism, ground-truth algebra, matches."""

import numpy as np
import pytest

from more3d import AffineAlignment, CameraModel, PixelGrid, camera_frame_points
from more3d.synth import (
    Plane,
    SceneSpec,
    Sphere,
    Staircase,
    TwoPlanes,
    default_cameras,
    generate,
    spec_from_dict,
    stored_to_world,
    write_bundle,
)


def small_spec(**overrides):
    base = dict(
        surface=Sphere(center=(0.0, 0.0, 2.0), radius=0.8),
        grid=PixelGrid(width=16, height=12),
        affine_ref=AffineAlignment(1.2, np.array([0.1, 0.0, -0.05])),
        affine_src=AffineAlignment(0.8, np.array([-0.2, 0.1, 0.3])),
        seed=13,
    )
    base.update(overrides)
    return SceneSpec(**base)


def test_generate_is_deterministic():
    spec = small_spec(noise_sigma=0.01, outlier_fraction=0.2)
    p1, g1 = generate(spec)
    p2, g2 = generate(spec)
    np.testing.assert_array_equal(p1.ref.pointmap.points, p2.ref.pointmap.points)
    np.testing.assert_array_equal(p1.src.pointmap.points, p2.src.pointmap.points)
    np.testing.assert_array_equal(p1.matches.ref_pixels, p2.matches.ref_pixels)
    np.testing.assert_array_equal(p1.matches.src_pixels, p2.matches.src_pixels)
    np.testing.assert_array_equal(g1.inlier_labels, g2.inlier_labels)
    np.testing.assert_array_equal(p1.ref.image, p2.ref.image)


def test_write_bundle_is_byte_identical(tmp_path):
    spec = small_spec(noise_sigma=0.005, outlier_fraction=0.1)
    root1 = write_bundle(spec, tmp_path / "a")
    root2 = write_bundle(spec, tmp_path / "b")
    names1 = sorted(p.name for p in root1.iterdir())
    names2 = sorted(p.name for p in root2.iterdir())
    assert names1 == names2
    assert "ground_truth.npz" in names1
    for name in names1:
        assert (root1 / name).read_bytes() == (root2 / name).read_bytes(), name


def test_stored_maps_encode_distorted_world():
    spec = small_spec()  # no noise
    pair, gt = generate(spec)
    for bundle, world, valid, aff in (
        (pair.ref, gt.true_points_ref, gt.true_valid_ref, gt.affine_ref),
        (pair.src, gt.true_points_src, gt.true_valid_src, gt.affine_src),
    ):
        np.testing.assert_array_equal(bundle.pointmap.valid, valid)
        stored_world = stored_to_world(bundle.pointmap.points, bundle.camera)
        np.testing.assert_allclose(
            stored_world[valid], aff.apply(world)[valid], rtol=0, atol=1e-9
        )


def test_true_alignment_maps_src_onto_ref():
    spec = small_spec()
    _, gt = generate(spec)
    assert gt.true_alpha == pytest.approx(1.2 / 0.8, rel=1e-15)
    # the published alignment must turn the src distortion into the ref one
    rng = np.random.default_rng(0)
    p = rng.normal(0.0, 1.0, (50, 3))
    lhs = gt.true_alpha * gt.affine_src.apply(p) + gt.true_beta
    np.testing.assert_allclose(lhs, gt.affine_ref.apply(p), rtol=0, atol=1e-12)


def test_true_matches_reproject_exactly():
    spec = small_spec(outlier_fraction=0.25)
    pair, gt = generate(spec)
    labels = gt.inlier_labels
    assert labels.any() and (~labels).any()
    rp = pair.matches.ref_pixels[labels]
    sp = pair.matches.src_pixels[labels]
    # reference endpoints are integer pixel positions of valid surface hits
    np.testing.assert_array_equal(rp, np.rint(rp))
    ri, ci = rp[:, 0].astype(int), rp[:, 1].astype(int)
    assert gt.true_valid_ref[ri, ci].all()
    # the source endpoint is the exact projection of the same surface point
    cam = pair.src.camera
    pc = camera_frame_points(gt.true_points_ref[ri, ci], cam)
    uv = (pc / pc[:, 2:3]) @ cam.k.T
    np.testing.assert_allclose(sp[:, 0], uv[:, 1] - 0.5, rtol=0, atol=1e-9)
    np.testing.assert_allclose(sp[:, 1], uv[:, 0] - 0.5, rtol=0, atol=1e-9)
    # and lands within half a pixel of a valid rounded source pixel
    rr, cc = np.rint(sp[:, 0]).astype(int), np.rint(sp[:, 1]).astype(int)
    assert np.hypot(sp[:, 0] - rr, sp[:, 1] - cc).max() <= 0.5
    assert gt.true_valid_src[rr, cc].all()


def test_outliers_sit_beyond_adaptive_margin():
    spec = small_spec(outlier_fraction=0.25)
    pair, gt = generate(spec)
    world_ref = stored_to_world(pair.ref.pointmap.points, pair.ref.camera)
    world_src = stored_to_world(pair.src.pointmap.points, pair.src.camera)
    depths = camera_frame_points(
        world_ref[pair.ref.pointmap.valid], pair.ref.camera
    )[:, 2]
    margin = 1.5 * 0.05 * np.median(depths[depths > 0])
    out = ~gt.inlier_labels
    rp = pair.matches.ref_pixels[out].astype(int)
    sp = pair.matches.src_pixels[out].astype(int)
    resid = np.linalg.norm(
        gt.true_alpha * world_src[sp[:, 0], sp[:, 1]]
        + gt.true_beta
        - world_ref[rp[:, 0], rp[:, 1]],
        axis=1,
    )
    assert resid.min() > margin


def test_outlier_count_follows_fraction():
    spec = small_spec(outlier_fraction=0.2, max_matches=60)
    pair, gt = generate(spec)
    assert gt.inlier_labels.sum() == 60
    # floor(f * n / (1 - f)) with f=0.2, n=60
    assert (~gt.inlier_labels).sum() == 15
    assert len(pair.matches) == 75
    assert pair.matches.inlier.all()  # generator labels live in the ground truth


def test_max_matches_subsamples():
    full, _ = generate(small_spec())
    capped, gt = generate(small_spec(max_matches=40))
    assert len(full.matches) > 40
    assert len(capped.matches) == 40
    assert gt.inlier_labels.all()


def test_spec_validation():
    with pytest.raises(ValueError):
        small_spec(outlier_fraction=0.5)
    with pytest.raises(ValueError):
        small_spec(noise_sigma=-0.1)
    with pytest.raises(ValueError):
        small_spec(texture="marble")


def test_spec_from_dict_matches_direct_construction():
    raw = {
        "surface": {"type": "sphere", "center": [0.0, 0.0, 2.0], "radius": 0.8},
        "grid": {"width": 16, "height": 12},
        "affine_ref": {"scale": 1.2, "shift": [0.1, 0.0, -0.05]},
        "affine_src": {"scale": 0.8, "shift": [-0.2, 0.1, 0.3]},
        "noise_sigma": 0.01,
        "outlier_fraction": 0.2,
        "seed": 13,
    }
    spec = spec_from_dict(raw)
    direct = small_spec(noise_sigma=0.01, outlier_fraction=0.2)
    p1, _ = generate(spec)
    p2, _ = generate(direct)
    np.testing.assert_array_equal(p1.ref.pointmap.points, p2.ref.pointmap.points)
    np.testing.assert_array_equal(p1.matches.ref_pixels, p2.matches.ref_pixels)


def test_spec_from_dict_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown scene spec keys"):
        spec_from_dict({"seed": 1, "wavelength": 3})
    with pytest.raises(ValueError, match="unknown surface type"):
        spec_from_dict({"surface": {"type": "torus"}})


def test_spec_from_dict_reads_cameras():
    cams = default_cameras(PixelGrid(width=16, height=12), depth=2.0)
    raw = {
        "cameras": [
            {
                "intrinsics": cam.k.tolist(),
                "rotation": cam.rotation.tolist(),
                "translation": cam.translation.tolist(),
            }
            for cam in cams
        ]
    }
    spec = spec_from_dict(raw)
    assert spec.cameras is not None
    np.testing.assert_array_equal(spec.cameras[0].k, cams[0].k)
    np.testing.assert_array_equal(spec.cameras[1].rotation, cams[1].rotation)


# ---------------------------------------------------------------------------
# surfaces


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def test_plane_raycast():
    plane = Plane(normal=(0.0, 0.0, 1.0), offset=2.0)
    origin = np.zeros(3)
    dirs = np.stack([unit([0.1, -0.2, 1.0]), unit([0.0, 0.0, 1.0]), unit([1.0, 0.0, 0.0])])
    t = plane.raycast(origin, dirs)
    hits = origin + t[:2, None] * dirs[:2]
    np.testing.assert_allclose(hits[:, 2], 2.0, rtol=0, atol=1e-12)
    assert np.isinf(t[2])  # parallel ray never hits
    # behind the camera
    assert np.isinf(plane.raycast(origin, unit([0.0, 0.0, -1.0])[None])[0])


def test_sphere_raycast_hits_front_surface():
    sphere = Sphere(center=(0.0, 0.0, 2.0), radius=0.5)
    origin = np.zeros(3)
    dirs = np.stack([unit([0.0, 0.0, 1.0]), unit([0.05, 0.02, 1.0]), unit([1.0, 0.0, 0.0])])
    t = sphere.raycast(origin, dirs)
    assert t[0] == pytest.approx(1.5, rel=1e-12)  # near intersection, not far
    hit = origin + t[1] * dirs[1]
    assert np.linalg.norm(hit - np.array([0.0, 0.0, 2.0])) == pytest.approx(0.5, rel=1e-12)
    assert np.isinf(t[2])


def test_two_planes_degenerate_and_wedge():
    flat = TwoPlanes(dihedral_deg=180.0, depth=2.0)
    plane = Plane(offset=2.0)
    rng = np.random.default_rng(6)
    dirs = rng.normal(0.0, 1.0, (40, 3))
    dirs[:, 2] = np.abs(dirs[:, 2]) + 0.5
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origin = np.zeros(3)
    np.testing.assert_allclose(
        flat.raycast(origin, dirs), plane.raycast(origin, dirs), rtol=1e-12
    )
    wedge = TwoPlanes(dihedral_deg=90.0, depth=2.0)
    t = wedge.raycast(origin, dirs)
    hits = origin + t[:, None] * dirs
    ok = np.isfinite(t)
    # 45-degree fold toward the camera: z = depth - |x|
    np.testing.assert_allclose(
        hits[ok, 2], 2.0 - np.abs(hits[ok, 0]), rtol=0, atol=1e-9
    )


def test_staircase_hits_treads_or_risers():
    stairs = Staircase(step=0.25, depth=2.0, n_steps=8)
    rng = np.random.default_rng(15)
    dirs = rng.normal(0.0, 0.3, (60, 3))
    dirs[:, 2] = np.abs(dirs[:, 2]) + 0.8
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origin = np.zeros(3)
    t = stairs.raycast(origin, dirs)
    hits = origin + t[:, None] * dirs
    ok = np.isfinite(t)
    assert ok.any()
    x, z = hits[ok, 0], hits[ok, 2]
    k = np.round((z - 2.0) / 0.25)
    on_tread = (np.abs(z - (2.0 + k * 0.25)) < 1e-9) & (x >= k * 0.25 - 1e-9) & (
        x < (k + 1) * 0.25 + 1e-9
    )
    kx = np.round(x / 0.25)
    on_riser = np.abs(x - kx * 0.25) < 1e-9
    assert (on_tread | on_riser).all()


def test_default_cameras_converge_on_surface():
    grid = PixelGrid(width=16, height=12)
    cam_ref, cam_src = default_cameras(grid, depth=2.0)
    np.testing.assert_array_equal(cam_ref.center, np.zeros(3))
    np.testing.assert_allclose(cam_src.center, [0.3, 0.0, 0.0], rtol=1e-12)
    # both cameras see the surface anchor point in front of them
    anchor = np.array([[0.0, 0.0, 2.0]])
    for cam in (cam_ref, cam_src):
        assert camera_frame_points(anchor, cam)[0, 2] > 0
