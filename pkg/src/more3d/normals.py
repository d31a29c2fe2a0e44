"""Surface normals from point maps via 4-neighbor cross products."""

from __future__ import annotations

import numpy as np

from .core import CameraModel, NormalMap, PointMap

DEGENERATE_NORM = 1e-12


def normals_from_pointmap(pointmap: PointMap, camera: CameraModel) -> NormalMap:
    """Estimate per-pixel normals, oriented to face the camera.

    For each valid pixel the normal is the normalized average of cross
    products over the adjacent 4-neighbor pairs (right x down, down x left,
    left x up, up x right), using only pairs whose two neighbors are both
    valid. Pixels with fewer than two valid neighbors, or whose averaged
    cross product nearly vanishes, come out invalid.
    """
    h, w = pointmap.grid.shape
    pts = pointmap.points
    valid = pointmap.valid

    def shifted(dr: int, dc: int) -> tuple[np.ndarray, np.ndarray]:
        d = np.zeros_like(pts)
        v = np.zeros((h, w), dtype=bool)
        rs = slice(max(dr, 0), h + min(dr, 0))
        rd = slice(max(-dr, 0), h + min(-dr, 0))
        cs = slice(max(dc, 0), w + min(dc, 0))
        cd = slice(max(-dc, 0), w + min(-dc, 0))
        d[rd, cd] = pts[rs, cs] - pts[rd, cd]
        v[rd, cd] = valid[rs, cs]
        return d, v

    d_right, v_right = shifted(0, 1)
    d_down, v_down = shifted(1, 0)
    d_left, v_left = shifted(0, -1)
    d_up, v_up = shifted(-1, 0)

    acc = np.zeros_like(pts)
    for (da, va), (db, vb) in (
        ((d_right, v_right), (d_down, v_down)),
        ((d_down, v_down), (d_left, v_left)),
        ((d_left, v_left), (d_up, v_up)),
        ((d_up, v_up), (d_right, v_right)),
    ):
        pair_ok = (va & vb)[..., None]
        acc += np.where(pair_ok, np.cross(da, db), 0.0)

    norms = np.linalg.norm(acc, axis=-1)
    ok = valid & (norms > DEGENERATE_NORM)

    normals = np.zeros_like(pts)
    np.divide(acc, norms[..., None], out=normals, where=ok[..., None])

    # Orient toward the camera: n . (center - p) > 0.
    to_cam = camera.center - pts
    flip = (np.sum(normals * to_cam, axis=-1) < 0) & ok
    normals[flip] = -normals[flip]

    return NormalMap(pointmap.grid, normals, ok)
