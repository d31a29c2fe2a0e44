"""Bundle and result directory formats.

A bundle directory holds manifest.json plus NPY v1.0 C-order float32 arrays:
per view an image (H, W, 3), camera-frame points (H, W, 3) and confidence
(H, W), plus matches (N, 4) rows of (ref_row, ref_col, src_row, src_col).
A result directory holds refined points/normals per view, alignment.json,
trace.csv, and a merged binary PLY cloud.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import (
    CameraModel,
    CorrespondenceSet,
    PixelGrid,
    PointMap,
    ScenePair,
    ViewBundle,
)

MANIFEST_VERSION = "1.0.0"
TRACE_COLUMNS = ("iter", "level", "intra", "inter", "knn", "ray", "sim", "normal", "total")


class BundleError(ValueError):
    """Malformed bundle or result directory."""


def _write_npy(path: Path, arr: np.ndarray) -> None:
    out = np.ascontiguousarray(arr, dtype=np.float32)
    with open(path, "wb") as fh:
        np.lib.format.write_array(fh, out, version=(1, 0))


def _read_npy(path: Path, name: str) -> np.ndarray:
    if not path.is_file():
        raise FileNotFoundError(f"bundle file missing: {name}")
    arr = np.load(path)
    if arr.dtype == np.float64:
        arr = arr.astype(np.float32)
    elif arr.dtype != np.float32:
        raise BundleError(f"{name}: expected float32 or float64, got {arr.dtype}")
    return arr


def _expect_shape(arr: np.ndarray, shape: tuple, name: str) -> None:
    ok = len(arr.shape) == len(shape) and all(
        s is None or s == a for s, a in zip(shape, arr.shape)
    )
    if not ok:
        want = "x".join("N" if s is None else str(s) for s in shape)
        raise BundleError(f"{name}: expected shape {want}, got {arr.shape}")


def _camera_from_view(view: dict, name: str) -> CameraModel:
    try:
        k = np.array(view["intrinsics"], dtype=np.float64).reshape(3, 3)
        r = np.array(view["rotation"], dtype=np.float64).reshape(3, 3)
        t = np.array(view["translation"], dtype=np.float64).reshape(3)
    except (KeyError, ValueError) as exc:
        raise BundleError(f"{name}: bad camera fields ({exc})") from exc
    if not np.isfinite(k).all():
        raise BundleError(f"{name}: non-finite intrinsics")
    try:
        return CameraModel(k, r, t)
    except ValueError as exc:
        raise BundleError(f"{name}: {exc}") from exc


def _read_manifest(root: Path) -> dict:
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise FileNotFoundError(f"bundle file missing: {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise BundleError(f"manifest.json: invalid JSON ({exc})") from exc
    if manifest.get("frame_convention") != "camera_frame":
        raise BundleError("manifest.json: frame_convention must be 'camera_frame'")
    views = manifest.get("views")
    if not isinstance(views, list) or len(views) != 2:
        raise BundleError("manifest.json: exactly two views required")
    return manifest


def load_cameras(path: str | Path) -> tuple[CameraModel, CameraModel]:
    """Cameras alone from a manifest.json (bundle or result directory)."""
    manifest = _read_manifest(Path(path))
    views = manifest["views"]
    return (
        _camera_from_view(views[0], "view 0"),
        _camera_from_view(views[1], "view 1"),
    )


def load_bundle(path: str | Path, confidence_threshold: float = 0.0) -> ScenePair:
    """Load a bundle directory into a ScenePair.

    Points stay in the camera frame; validity is all-finite points with
    confidence >= confidence_threshold. Normals are left underived.
    """
    root = Path(path)
    manifest = _read_manifest(root)
    views = manifest["views"]

    bundles = []
    grid0: Optional[PixelGrid] = None
    for idx, view in enumerate(views):
        name = f"view {idx}"
        image = _read_npy(root / view["image_file"], view["image_file"]).astype(np.float64)
        points = _read_npy(root / view["points_file"], view["points_file"]).astype(np.float64)
        conf = _read_npy(root / view["confidence_file"], view["confidence_file"]).astype(np.float64)
        _expect_shape(image, (None, None, 3), view["image_file"])
        h, w = image.shape[:2]
        _expect_shape(points, (h, w, 3), view["points_file"])
        _expect_shape(conf, (h, w), view["confidence_file"])
        grid = PixelGrid(width=w, height=h)
        if grid0 is None:
            grid0 = grid
        camera = _camera_from_view(view, name)
        valid = np.isfinite(points).all(axis=-1) & (conf >= confidence_threshold)
        pm = PointMap(grid, np.where(valid[..., None], points, 0.0), valid, conf)
        bundles.append(ViewBundle(image=image, pointmap=pm, camera=camera))

    matches_file = manifest.get("matches_file", "matches.npy")
    matches = _read_npy(root / matches_file, matches_file).astype(np.float64)
    _expect_shape(matches, (None, 4), matches_file)

    corr = CorrespondenceSet(
        ref_pixels=matches[:, 0:2],
        src_pixels=matches[:, 2:4],
        inlier=np.ones(matches.shape[0], dtype=bool),
    )
    try:
        return ScenePair(ref=bundles[0], src=bundles[1], matches=corr)
    except ValueError as exc:
        raise BundleError(f"{matches_file}: {exc}") from exc


def save_bundle(
    path: str | Path,
    images: Sequence[np.ndarray],
    points: Sequence[np.ndarray],
    confidences: Sequence[np.ndarray],
    cameras: Sequence[CameraModel],
    matches: np.ndarray,
    units: str = "arbitrary",
) -> Path:
    """Write a two-view bundle directory (camera-frame points)."""
    if not (len(images) == len(points) == len(confidences) == len(cameras) == 2):
        raise ValueError("bundles hold exactly two views")
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    names = ("ref", "src")
    views = []
    for i, tag in enumerate(names):
        files = {
            "image_file": f"image_{tag}.npy",
            "points_file": f"points_{tag}.npy",
            "confidence_file": f"confidence_{tag}.npy",
        }
        _write_npy(root / files["image_file"], images[i])
        _write_npy(root / files["points_file"], points[i])
        _write_npy(root / files["confidence_file"], confidences[i])
        cam = cameras[i]
        views.append(
            {
                **files,
                "intrinsics": [float(x) for x in cam.k.ravel()],
                "rotation": [float(x) for x in cam.rotation.ravel()],
                "translation": [float(x) for x in cam.translation.ravel()],
            }
        )
    _write_npy(root / "matches.npy", matches)
    manifest = {
        "version": MANIFEST_VERSION,
        "frame_convention": "camera_frame",
        "units": units,
        "views": views,
        "matches_file": "matches.npy",
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def _write_ply(path: Path, points: np.ndarray, colors: np.ndarray) -> None:
    n = points.shape[0]
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "property uchar red\n"
        "property uchar green\n"
        "property uchar blue\n"
        "end_header\n"
    )
    rec = np.empty(
        n,
        dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
               ("red", "u1"), ("green", "u1"), ("blue", "u1")],
    )
    rec["x"], rec["y"], rec["z"] = points[:, 0], points[:, 1], points[:, 2]
    rgb = np.clip(np.round(colors * 255.0), 0, 255).astype(np.uint8)
    rec["red"], rec["green"], rec["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        rec.tofile(fh)


def save_result(
    path: str | Path,
    state,
    alignment: dict,
    trace: Sequence[dict],
    pair: ScenePair,
) -> Path:
    """Write a refinement result directory.

    `state` provides points_{ref,src}, normals_{ref,src}, valid_{ref,src};
    `alignment` holds scale/shift/s_ref/s_src; `trace` is the per-iteration
    loss record; `pair` supplies image colors for the merged PLY.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)

    _write_npy(root / "refined_points_ref.npy", state.points_ref)
    _write_npy(root / "refined_points_src.npy", state.points_src)
    _write_npy(root / "refined_normals_ref.npy", state.normals_ref)
    _write_npy(root / "refined_normals_src.npy", state.normals_src)

    payload = {
        "scale": float(alignment["scale"]),
        "shift": [float(x) for x in alignment["shift"]],
        "s_ref": float(alignment["s_ref"]),
        "s_src": float(alignment["s_src"]),
    }
    (root / "alignment.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    with open(root / "trace.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for row in trace:
            writer.writerow(
                [int(row["iter"]), int(row["level"])]
                + [f"{float(row[c]):.17g}" for c in TRACE_COLUMNS[2:]]
            )

    pts = np.concatenate(
        [state.points_ref[state.valid_ref], state.points_src[state.valid_src]], axis=0
    )
    cols = np.concatenate(
        [pair.ref.image[state.valid_ref], pair.src.image[state.valid_src]], axis=0
    )
    _write_ply(root / "cloud.ply", pts, cols)
    return root


def load_result(path: str | Path) -> dict:
    """Read back a result directory (arrays bitwise as stored)."""
    root = Path(path)
    out = {}
    for key in ("points_ref", "points_src", "normals_ref", "normals_src"):
        out[key] = _read_npy(root / f"refined_{key}.npy", f"refined_{key}.npy")
    apath = root / "alignment.json"
    if not apath.is_file():
        raise FileNotFoundError("bundle file missing: alignment.json")
    out["alignment"] = json.loads(apath.read_text())
    tpath = root / "trace.csv"
    if not tpath.is_file():
        raise FileNotFoundError("bundle file missing: trace.csv")
    with open(tpath, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TRACE_COLUMNS:
            raise BundleError(f"trace.csv: unexpected columns {reader.fieldnames}")
        out["trace"] = [
            {
                "iter": int(r["iter"]),
                "level": int(r["level"]),
                **{c: float(r[c]) for c in TRACE_COLUMNS[2:]},
            }
            for r in reader
        ]
    return out
