"""Refinement graph and loss terms.

The state holds both views' points and normals plus one scale variable per
view. Edges connect valid pixels only; every norm is smoothed as
sqrt(x.x + eps^2) so gradients exist at zero residual. Edge weights and kNN
neighbor selections are constants of the graph: gradients never flow through
them, and kNN edges stay fixed between refreshes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.spatial import cKDTree

from .core import PixelGrid, RefinementConfig, ScenePair, pixel_directions
from . import runtime

SMOOTH_EPS = 1e-8
W3D_FLOOR = 1e-100


class GraphBuildError(RuntimeError):
    """Graph construction cannot proceed (e.g. no valid pixels)."""


class NonFiniteLossError(RuntimeError):
    def __init__(self, term: str):
        super().__init__(f"non-finite {term} loss")
        self.term = term
        self.trace: list = []


@dataclass
class RefinementState:
    """Optimized quantities. Invalid pixels are frozen and carry no edges."""

    points_ref: np.ndarray
    points_src: np.ndarray
    normals_ref: np.ndarray
    normals_src: np.ndarray
    valid_ref: np.ndarray
    valid_src: np.ndarray
    s_ref: float = 1.0
    s_src: float = 1.0

    @classmethod
    def from_pair(cls, pair: ScenePair) -> "RefinementState":
        """Initial state from a world-frame pair with derived normals.

        Pixels whose point or normal is invalid are excluded outright.
        """
        if pair.ref.normals is None or pair.src.normals is None:
            raise ValueError("pair must carry derived normals")
        return cls(
            points_ref=pair.ref.pointmap.points.copy(),
            points_src=pair.src.pointmap.points.copy(),
            normals_ref=pair.ref.normals.normals.copy(),
            normals_src=pair.src.normals.normals.copy(),
            valid_ref=pair.ref.pointmap.valid & pair.ref.normals.valid,
            valid_src=pair.src.pointmap.valid & pair.src.normals.valid,
        )

    def points(self, view: str) -> np.ndarray:
        return self.points_ref if view == "ref" else self.points_src

    def normals(self, view: str) -> np.ndarray:
        return self.normals_ref if view == "ref" else self.normals_src

    def valid(self, view: str) -> np.ndarray:
        return self.valid_ref if view == "ref" else self.valid_src

    def scale(self, view: str) -> float:
        return self.s_ref if view == "ref" else self.s_src

    def copy(self) -> "RefinementState":
        return RefinementState(
            self.points_ref.copy(), self.points_src.copy(),
            self.normals_ref.copy(), self.normals_src.copy(),
            self.valid_ref.copy(), self.valid_src.copy(),
            self.s_ref, self.s_src,
        )


@dataclass
class StateGrads:
    points_ref: np.ndarray
    points_src: np.ndarray
    normals_ref: np.ndarray
    normals_src: np.ndarray
    s_ref: float = 0.0
    s_src: float = 0.0

    @classmethod
    def zeros_like(cls, state: RefinementState) -> "StateGrads":
        return cls(
            np.zeros_like(state.points_ref), np.zeros_like(state.points_src),
            np.zeros_like(state.normals_ref), np.zeros_like(state.normals_src),
        )

    def points(self, view: str) -> np.ndarray:
        return self.points_ref if view == "ref" else self.points_src

    def normals(self, view: str) -> np.ndarray:
        return self.normals_ref if view == "ref" else self.normals_src

    def add_scale(self, view: str, value: float) -> None:
        if view == "ref":
            self.s_ref += value
        else:
            self.s_src += value


@dataclass
class PixelEdges:
    """Directed pixel pairs (flat indices) with constant weights."""

    a: np.ndarray
    b: np.ndarray
    w: np.ndarray

    @classmethod
    def empty(cls) -> "PixelEdges":
        z = np.zeros(0, dtype=np.intp)
        return cls(z, z, np.zeros(0))


@dataclass
class PairedEdges:
    """Matched-offset pairs: anchors (i, j) and offset endpoints (i2, j2)."""

    i: np.ndarray
    i2: np.ndarray
    j: np.ndarray
    j2: np.ndarray
    w: np.ndarray

    @classmethod
    def empty(cls) -> "PairedEdges":
        z = np.zeros(0, dtype=np.intp)
        return cls(z, z, z, z, np.zeros(0))


@dataclass
class RayAnchors:
    origin: np.ndarray
    dirs: np.ndarray  # (HW, 3), rows meaningful at valid pixels only
    idx: np.ndarray   # valid flat indices


@dataclass
class ViewPriors:
    pbar: np.ndarray      # (HW, 3) initial points
    nbar: np.ndarray      # (HW, 3) initial normals
    m: np.ndarray         # (HW,) mask weights (validity and confidence)
    centroid: np.ndarray  # (3,) mean of pbar over the valid set
    bdist: np.ndarray     # (HW,) smoothed |pbar - centroid|
    idx: np.ndarray       # valid flat indices


@dataclass
class RefinementGraph:
    shape_ref: tuple[int, int]
    shape_src: tuple[int, int]
    intra_ref: PixelEdges
    intra_src: PixelEdges
    inter_first_ref: PixelEdges   # anchor ref pixel -> src window pixel
    inter_first_src: PixelEdges   # anchor src pixel -> ref window pixel
    inter_pair: PairedEdges       # shared by both anchored directions
    knn_ref: PixelEdges           # ref query -> src neighbor
    knn_src: PixelEdges           # src query -> ref neighbor
    rays_ref: RayAnchors
    rays_src: RayAnchors
    priors_ref: ViewPriors
    priors_src: ViewPriors
    colors_ref: np.ndarray        # (HW, 3), for kNN weight refreshes
    colors_src: np.ndarray

    def priors(self, view: str) -> ViewPriors:
        return self.priors_ref if view == "ref" else self.priors_src

    def rays(self, view: str) -> RayAnchors:
        return self.rays_ref if view == "ref" else self.rays_src

    def intra(self, view: str) -> PixelEdges:
        return self.intra_ref if view == "ref" else self.intra_src


def smooth_norm(x: np.ndarray, eps: float = SMOOTH_EPS) -> np.ndarray:
    """sqrt(x.x + eps^2) over the last axis (or of a scalar array)."""
    if x.ndim and x.shape[-1] == 3:
        return np.sqrt((x * x).sum(axis=-1) + eps * eps)
    return np.sqrt(x * x + eps * eps)


def _window_offsets(radius: int, include_center: bool):
    offs = [
        (dr, dc)
        for dr in range(-radius, radius + 1)
        for dc in range(-radius, radius + 1)
        if include_center or (dr, dc) != (0, 0)
    ]
    return offs


def _patch_windows(image: np.ndarray, radius: int) -> np.ndarray:
    """(H, W, 3, k, k) view: NaN-padded patch around every pixel."""
    k = 2 * radius + 1
    padded = np.pad(
        image.astype(np.float64), ((radius, radius), (radius, radius), (0, 0)),
        constant_values=np.nan,
    )
    return sliding_window_view(padded, (k, k), axis=(0, 1))


def _patch_sq_diff(win_a, pix_a, win_b, pix_b) -> np.ndarray:
    """Squared patch difference, clipped at borders and rescaled to the full
    patch size so interior pairs give the plain squared Frobenius norm."""
    pa = win_a[pix_a[:, 0], pix_a[:, 1]]  # (E, 3, k, k)
    pb = win_b[pix_b[:, 0], pix_b[:, 1]]
    both = np.isfinite(pa[:, 0]) & np.isfinite(pb[:, 0])  # (E, k, k)
    diff = np.where(both[:, None], pa - pb, 0.0)
    sq = (diff * diff).sum(axis=(1, 2, 3))
    count = both.sum(axis=(1, 2))
    full = pa.shape[-1] * pa.shape[-2]
    return sq * (full / np.maximum(count, 1))


def _spatial_sq(pos_a: np.ndarray, pos_b: np.ndarray) -> np.ndarray:
    d = pos_a - pos_b
    return (d * d).sum(axis=-1)


def weight_2d(image: np.ndarray, l: tuple, l_prime: tuple, cfg: RefinementConfig) -> float:
    """Edge weight between two pixel positions of one image.

    Patches are compared at the rounded pixels; the spatial falloff uses the
    positions at subpixel precision.
    """
    win = _patch_windows(image, cfg.patch_radius)
    pa = np.array([[int(round(l[0])), int(round(l[1]))]])
    pb = np.array([[int(round(l_prime[0])), int(round(l_prime[1]))]])
    sq = _patch_sq_diff(win, pa, win, pb)[0]
    sp = _spatial_sq(np.asarray(l, dtype=np.float64), np.asarray(l_prime, dtype=np.float64))
    return float(
        np.exp(-sq / (2.0 * cfg.sigma_int**2)) * np.exp(-sp / (2.0 * cfg.sigma_spa**2))
    )


def weight_3d(color_i, color_j, normal_i, normal_j, cfg: RefinementConfig) -> float:
    ci = np.asarray(color_i, dtype=np.float64)
    cj = np.asarray(color_j, dtype=np.float64)
    ni = np.asarray(normal_i, dtype=np.float64)
    nj = np.asarray(normal_j, dtype=np.float64)
    s2 = 2.0 * cfg.sigma_int**2
    w = np.exp(-((ci - cj) ** 2).sum() / s2) * np.exp(-((ni - nj) ** 2).sum() / s2)
    return float(w) if w >= W3D_FLOOR else 0.0


def _w3d_vec(colors_a, colors_b, normals_a, normals_b, sigma_int):
    s2 = 2.0 * sigma_int**2
    dc = ((colors_a - colors_b) ** 2).sum(axis=-1)
    dn = ((normals_a - normals_b) ** 2).sum(axis=-1)
    w = np.exp(-dc / s2) * np.exp(-dn / s2)
    w[w < W3D_FLOOR] = 0.0
    return w


def _intra_edges(image, valid, cfg) -> PixelEdges:
    h, w = valid.shape
    win = _patch_windows(image, cfg.patch_radius)
    flat = np.arange(h * w).reshape(h, w)
    s2i = 2.0 * cfg.sigma_int**2
    s2s = 2.0 * cfg.sigma_spa**2
    aa, bb, ww = [], [], []
    for dr, dc in _window_offsets(cfg.neighbor_radius, include_center=False):
        rs = slice(max(dr, 0), h + min(dr, 0))
        rd = slice(max(-dr, 0), h + min(-dr, 0))
        cs = slice(max(dc, 0), w + min(dc, 0))
        cd = slice(max(-dc, 0), w + min(-dc, 0))
        ok = valid[rd, cd] & valid[rs, cs]
        if not ok.any():
            continue
        ai = flat[rd, cd][ok]
        bi = flat[rs, cs][ok]
        pa = np.stack([ai // w, ai % w], axis=1)
        pb = np.stack([bi // w, bi % w], axis=1)
        sq = _patch_sq_diff(win, pa, win, pb)
        weight = np.exp(-sq / s2i) * np.exp(-(dr * dr + dc * dc) / s2s)
        aa.append(ai)
        bb.append(bi)
        ww.append(weight)
    if not aa:
        return PixelEdges.empty()
    return PixelEdges(np.concatenate(aa), np.concatenate(bb), np.concatenate(ww))


def _round_in(pix: np.ndarray, shape) -> np.ndarray:
    r = np.clip(np.rint(pix[:, 0]).astype(np.intp), 0, shape[0] - 1)
    c = np.clip(np.rint(pix[:, 1]).astype(np.intp), 0, shape[1] - 1)
    return np.stack([r, c], axis=1)


def _window_weights(image_win, anchor_float, anchor_px, valid, cfg, offsets):
    """Weights from one anchor set to its integer window pixels.

    Returns (anchor_sel, window_px_flat, weight) arrays concatenated over
    offsets; anchor_sel indexes into the anchor arrays.
    """
    h, w = valid.shape
    s2i = 2.0 * cfg.sigma_int**2
    s2s = 2.0 * cfg.sigma_spa**2
    n = anchor_px.shape[0]
    sel_all, px_all, w_all = [], [], []
    for dr, dc in offsets:
        r2 = anchor_px[:, 0] + dr
        c2 = anchor_px[:, 1] + dc
        ok = (r2 >= 0) & (r2 < h) & (c2 >= 0) & (c2 < w)
        ok[ok] &= valid[r2[ok], c2[ok]]
        if not ok.any():
            continue
        sel = np.flatnonzero(ok)
        pb = np.stack([r2[sel], c2[sel]], axis=1)
        sq = _patch_sq_diff(image_win, anchor_px[sel], image_win, pb)
        sp = _spatial_sq(anchor_float[sel], pb.astype(np.float64))
        w_all.append(np.exp(-sq / s2i) * np.exp(-sp / s2s))
        sel_all.append(sel)
        px_all.append(pb[:, 0] * w + pb[:, 1])
    if not sel_all:
        return (np.zeros(0, dtype=np.intp),) * 2 + (np.zeros(0),)
    return np.concatenate(sel_all), np.concatenate(px_all), np.concatenate(w_all)


def build_knn_edges(state: RefinementState, colors_ref, colors_src, cfg: RefinementConfig):
    """kNN edges in 3D, both directions, with color+normal weights."""
    out = []
    for qview, sview, qcolors, scolors in (
        ("ref", "src", colors_ref, colors_src),
        ("src", "ref", colors_src, colors_ref),
    ):
        qidx = np.flatnonzero(state.valid(qview).ravel())
        sidx = np.flatnonzero(state.valid(sview).ravel())
        if qidx.size == 0 or sidx.size == 0:
            out.append(PixelEdges.empty())
            continue
        qpts = state.points(qview).reshape(-1, 3)[qidx]
        spts = state.points(sview).reshape(-1, 3)[sidx]
        k = min(cfg.knn_k, sidx.size)
        tree = cKDTree(spts)
        _, nn = tree.query(qpts, k=k, workers=runtime.get_threads())
        nn = nn.reshape(qidx.size, k)
        a = np.repeat(qidx, k)
        b = sidx[nn.ravel()]
        w = _w3d_vec(
            qcolors[a], scolors[b],
            state.normals(qview).reshape(-1, 3)[a],
            state.normals(sview).reshape(-1, 3)[b],
            cfg.sigma_int,
        )
        out.append(PixelEdges(a, b, w))
    return out[0], out[1]


def _view_priors(pair_view, valid, cfg) -> ViewPriors:
    pts = pair_view.pointmap.points.reshape(-1, 3)
    nrm = pair_view.normals.normals.reshape(-1, 3)
    conf = pair_view.pointmap.confidence.ravel()
    vflat = valid.ravel()
    idx = np.flatnonzero(vflat)
    if idx.size == 0:
        raise GraphBuildError("no valid pixels in view")
    centroid = pts[idx].mean(axis=0)
    m = (vflat & (conf >= cfg.confidence_threshold)).astype(np.float64)
    bdist = smooth_norm(pts - centroid)
    return ViewPriors(pbar=pts.copy(), nbar=nrm.copy(), m=m,
                      centroid=centroid, bdist=bdist, idx=idx)


def build_graph(pair: ScenePair, state: RefinementState, cfg: RefinementConfig) -> RefinementGraph:
    """Assemble all edge sets for the current pair and state.

    2D weights depend only on the images and match positions; kNN edges and
    3D weights are computed from the state passed here and stay constant
    until the next refresh.
    """
    shape_ref = state.valid_ref.shape
    shape_src = state.valid_src.shape
    if not (state.valid_ref.any() or state.valid_src.any()):
        raise GraphBuildError("no valid pixels in either view")

    intra_ref = _intra_edges(pair.ref.image, state.valid_ref, cfg)
    intra_src = _intra_edges(pair.src.image, state.valid_src, cfg)

    # Inter-view edges hang off the inlier matches.
    inl = pair.matches.inlier
    ref_f = pair.matches.ref_pixels[inl]
    src_f = pair.matches.src_pixels[inl]
    ref_px = _round_in(ref_f, shape_ref)
    src_px = _round_in(src_f, shape_src)
    anchors_ok = (
        state.valid_ref[ref_px[:, 0], ref_px[:, 1]]
        & state.valid_src[src_px[:, 0], src_px[:, 1]]
    )
    ref_f, src_f = ref_f[anchors_ok], src_f[anchors_ok]
    ref_px, src_px = ref_px[anchors_ok], src_px[anchors_ok]

    win_ref = _patch_windows(pair.ref.image, cfg.patch_radius)
    win_src = _patch_windows(pair.src.image, cfg.patch_radius)
    offsets = _window_offsets(cfg.neighbor_radius, include_center=True)
    wr = shape_ref[1]
    ws = shape_src[1]

    # First sums: anchor in one view, window around the match in the other.
    sel, px, wgt = _window_weights(win_src, src_f, src_px, state.valid_src, cfg, offsets)
    inter_first_ref = PixelEdges(ref_px[sel, 0] * wr + ref_px[sel, 1], px, wgt)
    sel, px, wgt = _window_weights(win_ref, ref_f, ref_px, state.valid_ref, cfg, offsets)
    inter_first_src = PixelEdges(src_px[sel, 0] * ws + src_px[sel, 1], px, wgt)

    # Paired offsets: the same displacement applied on both sides.
    pi, pi2, pj, pj2, pw = [], [], [], [], []
    for dr, dc in offsets:
        r2r = ref_px[:, 0] + dr
        c2r = ref_px[:, 1] + dc
        r2s = src_px[:, 0] + dr
        c2s = src_px[:, 1] + dc
        ok = (
            (r2r >= 0) & (r2r < shape_ref[0]) & (c2r >= 0) & (c2r < shape_ref[1])
            & (r2s >= 0) & (r2s < shape_src[0]) & (c2s >= 0) & (c2s < shape_src[1])
        )
        ok[ok] &= (
            state.valid_ref[r2r[ok], c2r[ok]] & state.valid_src[r2s[ok], c2s[ok]]
        )
        if not ok.any():
            continue
        sel = np.flatnonzero(ok)
        pr2 = np.stack([r2r[sel], c2r[sel]], axis=1)
        ps2 = np.stack([r2s[sel], c2s[sel]], axis=1)
        sq_r = _patch_sq_diff(win_ref, ref_px[sel], win_ref, pr2)
        sq_s = _patch_sq_diff(win_src, src_px[sel], win_src, ps2)
        sp_r = _spatial_sq(ref_f[sel], pr2.astype(np.float64))
        sp_s = _spatial_sq(src_f[sel], ps2.astype(np.float64))
        s2i = 2.0 * cfg.sigma_int**2
        s2s = 2.0 * cfg.sigma_spa**2
        w_r = np.exp(-sq_r / s2i) * np.exp(-sp_r / s2s)
        w_s = np.exp(-sq_s / s2i) * np.exp(-sp_s / s2s)
        pi.append(ref_px[sel, 0] * wr + ref_px[sel, 1])
        pi2.append(pr2[:, 0] * wr + pr2[:, 1])
        pj.append(src_px[sel, 0] * ws + src_px[sel, 1])
        pj2.append(ps2[:, 0] * ws + ps2[:, 1])
        pw.append(w_r * w_s)
    if pi:
        inter_pair = PairedEdges(
            np.concatenate(pi), np.concatenate(pi2),
            np.concatenate(pj), np.concatenate(pj2), np.concatenate(pw),
        )
    else:
        inter_pair = PairedEdges.empty()

    colors_ref = pair.ref.image.reshape(-1, 3).astype(np.float64)
    colors_src = pair.src.image.reshape(-1, 3).astype(np.float64)
    knn_ref, knn_src = build_knn_edges(state, colors_ref, colors_src, cfg)

    rays = []
    for view, bundle in (("ref", pair.ref), ("src", pair.src)):
        dirs = pixel_directions(bundle.camera, bundle.grid).reshape(-1, 3)
        rays.append(
            RayAnchors(
                origin=bundle.camera.center,
                dirs=dirs,
                idx=np.flatnonzero(state.valid(view).ravel()),
            )
        )

    return RefinementGraph(
        shape_ref=shape_ref,
        shape_src=shape_src,
        intra_ref=intra_ref,
        intra_src=intra_src,
        inter_first_ref=inter_first_ref,
        inter_first_src=inter_first_src,
        inter_pair=inter_pair,
        knn_ref=knn_ref,
        knn_src=knn_src,
        rays_ref=rays[0],
        rays_src=rays[1],
        priors_ref=_view_priors(pair.ref, state.valid_ref, cfg),
        priors_src=_view_priors(pair.src, state.valid_src, cfg),
        colors_ref=colors_ref,
        colors_src=colors_src,
    )


def refresh_knn(graph: RefinementGraph, state: RefinementState, cfg: RefinementConfig) -> RefinementGraph:
    """New graph with kNN edges rebuilt from the current state."""
    knn_ref, knn_src = build_knn_edges(state, graph.colors_ref, graph.colors_src, cfg)
    return replace(graph, knn_ref=knn_ref, knn_src=knn_src)


def _acc_rows(target: np.ndarray, idx: np.ndarray, rows: np.ndarray) -> None:
    # Scatter-add with duplicate indices; bincount keeps a fixed summation
    # order (and is much faster than ufunc.at).
    n = target.shape[0]
    for c in range(3):
        target[:, c] += np.bincount(idx, weights=rows[:, c], minlength=n)


def _planarity_pair(pts_a, nrm_a, pts_b, ia, ib, w, gamma, eps, grads_a_p, grads_b_p,
                    grads_a_n, nrm_b, grads_b_n, scale):
    """Shared kernel: w * (sn(n_a[ia] . (P_b[ib] - P_a[ia])) + gamma * sn(n_b[ib] - n_a[ia]))."""
    d = pts_b[ib] - pts_a[ia]
    na = nrm_a[ia]
    u = (na * d).sum(axis=1)
    su = np.sqrt(u * u + eps * eps)
    dn = nrm_b[ib] - nrm_a[ia]
    sn = np.sqrt((dn * dn).sum(axis=1) + eps * eps)
    val = (w * (su + gamma * sn)).sum()
    if grads_a_p is not None:
        q = (scale * w * u / su)[:, None]
        _acc_rows(grads_b_p, ib, q * na)
        _acc_rows(grads_a_p, ia, -q * na)
        _acc_rows(grads_a_n, ia, q * d)
        qv = (scale * w * gamma / sn)[:, None] * dn
        _acc_rows(grads_b_n, ib, qv)
        _acc_rows(grads_a_n, ia, -qv)
    return float(val)


def loss_intra(state: RefinementState, graph: RefinementGraph, view: str,
               gamma: float, eps: float = SMOOTH_EPS, grads: Optional[StateGrads] = None,
               grad_scale: float = 1.0) -> float:
    """Within-view planarity and normal smoothness over the pixel window."""
    e = graph.intra(view)
    if e.a.size == 0:
        return 0.0
    pts = state.points(view).reshape(-1, 3)
    nrm = state.normals(view).reshape(-1, 3)
    gp = grads.points(view).reshape(-1, 3) if grads is not None else None
    gn = grads.normals(view).reshape(-1, 3) if grads is not None else None
    return _planarity_pair(pts, nrm, pts, e.a, e.b, e.w, gamma, eps,
                           gp, gp, gn, nrm, gn, grad_scale)


def loss_inter(state: RefinementState, graph: RefinementGraph, anchor: str,
               gamma: float, rho: float, eps: float = SMOOTH_EPS,
               grads: Optional[StateGrads] = None, grad_scale: float = 1.0) -> float:
    """Cross-view consistency anchored at `anchor` ('ref' or 'src').

    First sum: anchor normal against the window around its match in the other
    view. Second sum (weight rho): paired equal offsets on both sides.
    """
    other = "src" if anchor == "ref" else "ref"
    pts_a = state.points(anchor).reshape(-1, 3)
    nrm_a = state.normals(anchor).reshape(-1, 3)
    pts_o = state.points(other).reshape(-1, 3)
    nrm_o = state.normals(other).reshape(-1, 3)
    gp_a = gn_a = gp_o = gn_o = None
    if grads is not None:
        gp_a = grads.points(anchor).reshape(-1, 3)
        gn_a = grads.normals(anchor).reshape(-1, 3)
        gp_o = grads.points(other).reshape(-1, 3)
        gn_o = grads.normals(other).reshape(-1, 3)

    first = graph.inter_first_ref if anchor == "ref" else graph.inter_first_src
    total = 0.0
    if first.a.size:
        total += _planarity_pair(pts_a, nrm_a, pts_o, first.a, first.b, first.w,
                                 gamma, eps, gp_a, gp_o, gn_a, nrm_o, gn_o, grad_scale)

    pe = graph.inter_pair
    if pe.i.size:
        if anchor == "ref":
            ia, ia2, ja, ja2 = pe.i, pe.i2, pe.j, pe.j2
            pts_own, pts_oth = pts_a, pts_o
            gp_own, gp_oth = gp_a, gp_o
        else:
            ia, ia2, ja, ja2 = pe.j, pe.j2, pe.i, pe.i2
            pts_own, pts_oth = pts_a, pts_o
            gp_own, gp_oth = gp_a, gp_o
        # u = n_anchor[ia] . (P_anchor[ia2] - P_other[ja2])
        d = pts_own[ia2] - pts_oth[ja2]
        na = nrm_a[ia]
        u = (na * d).sum(axis=1)
        su = np.sqrt(u * u + eps * eps)
        nd = nrm_a[ia] - nrm_o[ja]
        snd = np.sqrt((nd * nd).sum(axis=1) + eps * eps)
        total += float((rho * pe.w * (su + 0.5 * gamma * snd)).sum())
        if grads is not None:
            q = (grad_scale * rho * pe.w * u / su)[:, None]
            _acc_rows(gp_own, ia2, q * na)
            _acc_rows(gp_oth, ja2, -q * na)
            _acc_rows(gn_a, ia, q * d)
            qv = (grad_scale * rho * pe.w * 0.5 * gamma / snd)[:, None] * nd
            _acc_rows(gn_a, ia, qv)
            _acc_rows(gn_o, ja, -qv)
    return total


def loss_knn(state: RefinementState, graph: RefinementGraph, direction: str,
             eps: float = SMOOTH_EPS, grads: Optional[StateGrads] = None,
             grad_scale: float = 1.0) -> float:
    """Mutual planarity and normal agreement over 3D nearest neighbors."""
    e = graph.knn_ref if direction == "ref" else graph.knn_src
    if e.a.size == 0:
        return 0.0
    va = "ref" if direction == "ref" else "src"
    vb = "src" if direction == "ref" else "ref"
    pa = state.points(va).reshape(-1, 3)
    na = state.normals(va).reshape(-1, 3)
    pb = state.points(vb).reshape(-1, 3)
    nb = state.normals(vb).reshape(-1, 3)

    d = pa[e.a] - pb[e.b]
    nia = na[e.a]
    nib = nb[e.b]
    u1 = (nia * d).sum(axis=1)
    u2 = -(nib * d).sum(axis=1)
    s1 = np.sqrt(u1 * u1 + eps * eps)
    s2 = np.sqrt(u2 * u2 + eps * eps)
    nd = nia - nib
    s3 = np.sqrt((nd * nd).sum(axis=1) + eps * eps)
    val = float((e.w * (s1 + s2 + s3)).sum())
    if grads is not None:
        gpa = grads.points(va).reshape(-1, 3)
        gna = grads.normals(va).reshape(-1, 3)
        gpb = grads.points(vb).reshape(-1, 3)
        gnb = grads.normals(vb).reshape(-1, 3)
        q1 = (grad_scale * e.w * u1 / s1)[:, None]
        _acc_rows(gpa, e.a, q1 * nia)
        _acc_rows(gpb, e.b, -q1 * nia)
        _acc_rows(gna, e.a, q1 * d)
        q2 = (grad_scale * e.w * u2 / s2)[:, None]
        _acc_rows(gpb, e.b, q2 * nib)
        _acc_rows(gpa, e.a, -q2 * nib)
        _acc_rows(gnb, e.b, -q2 * d)
        qv = (grad_scale * e.w / s3)[:, None] * nd
        _acc_rows(gna, e.a, qv)
        _acc_rows(gnb, e.b, -qv)
    return val


def loss_ray(state: RefinementState, graph: RefinementGraph, view: str,
             eps: float = SMOOTH_EPS, grads: Optional[StateGrads] = None,
             grad_scale: float = 1.0) -> float:
    """Distance of each point from its pixel's viewing ray."""
    rays = graph.rays(view)
    if rays.idx.size == 0:
        return 0.0
    p = state.points(view).reshape(-1, 3)[rays.idx]
    r = rays.dirs[rays.idx]
    d = p - rays.origin
    c = np.cross(r, d)
    f = np.sqrt((c * c).sum(axis=1) + eps * eps)
    if grads is not None:
        gp = grads.points(view).reshape(-1, 3)
        _acc_rows(gp, rays.idx, grad_scale * np.cross(c / f[:, None], r))
    return float(f.sum())


def loss_similarity(state: RefinementState, graph: RefinementGraph, view: str,
                    eps: float = SMOOTH_EPS, grads: Optional[StateGrads] = None,
                    grad_scale: float = 1.0) -> float:
    """Keeps distances from the fixed prior centroid near s times the prior's."""
    pr = graph.priors(view)
    idx = pr.idx
    if idx.size == 0:
        return 0.0
    p = state.points(view).reshape(-1, 3)[idx]
    m = pr.m[idx]
    e = p - pr.centroid
    a = np.sqrt((e * e).sum(axis=1) + eps * eps)
    b = pr.bdist[idx]
    u = a - state.scale(view) * b
    su = np.sqrt(u * u + eps * eps)
    val = float((m * su).sum())
    if grads is not None:
        q = grad_scale * m * u / su
        gp = grads.points(view).reshape(-1, 3)
        _acc_rows(gp, idx, (q / a)[:, None] * e)
        grads.add_scale(view, float(-(q * b).sum()))
    return val


def loss_normal_prior(state: RefinementState, graph: RefinementGraph, view: str,
                      eps: float = SMOOTH_EPS, grads: Optional[StateGrads] = None,
                      grad_scale: float = 1.0) -> float:
    """Keeps normals near their initial estimates."""
    pr = graph.priors(view)
    idx = pr.idx
    if idx.size == 0:
        return 0.0
    n = state.normals(view).reshape(-1, 3)[idx]
    d = n - pr.nbar[idx]
    sd = np.sqrt((d * d).sum(axis=1) + eps * eps)
    m = pr.m[idx]
    val = float((m * sd).sum())
    if grads is not None:
        gn = grads.normals(view).reshape(-1, 3)
        _acc_rows(gn, idx, (grad_scale * m / sd)[:, None] * d)
    return val


TERM_NAMES = ("intra", "inter", "knn", "ray", "sim", "normal")


def total_loss_and_grad(
    state: RefinementState, graph: RefinementGraph, cfg: RefinementConfig,
    eps: float = SMOOTH_EPS, with_grads: bool = True,
) -> tuple[float, dict, Optional[StateGrads]]:
    """Weighted total over both views plus raw per-term sums.

    Per-term entries are unweighted; `total` carries the lambda weights.
    Raises NonFiniteLossError naming the first offending term.
    """
    grads = StateGrads.zeros_like(state) if with_grads else None
    terms = {}
    terms["intra"] = (
        loss_intra(state, graph, "ref", cfg.gamma, eps, grads, cfg.lambda_p)
        + loss_intra(state, graph, "src", cfg.gamma, eps, grads, cfg.lambda_p)
    )
    terms["inter"] = (
        loss_inter(state, graph, "ref", cfg.gamma, cfg.rho, eps, grads, cfg.lambda_p)
        + loss_inter(state, graph, "src", cfg.gamma, cfg.rho, eps, grads, cfg.lambda_p)
    )
    terms["knn"] = (
        loss_knn(state, graph, "ref", eps, grads, cfg.lambda_p)
        + loss_knn(state, graph, "src", eps, grads, cfg.lambda_p)
    )
    terms["ray"] = (
        loss_ray(state, graph, "ref", eps, grads, cfg.lambda_r)
        + loss_ray(state, graph, "src", eps, grads, cfg.lambda_r)
    )
    terms["sim"] = (
        loss_similarity(state, graph, "ref", eps, grads, cfg.lambda_s)
        + loss_similarity(state, graph, "src", eps, grads, cfg.lambda_s)
    )
    terms["normal"] = (
        loss_normal_prior(state, graph, "ref", eps, grads, cfg.lambda_n)
        + loss_normal_prior(state, graph, "src", eps, grads, cfg.lambda_n)
    )
    for name in TERM_NAMES:
        if not np.isfinite(terms[name]):
            raise NonFiniteLossError(name)
    total = (
        cfg.lambda_p * (terms["intra"] + terms["inter"] + terms["knn"])
        + cfg.lambda_r * terms["ray"]
        + cfg.lambda_s * terms["sim"]
        + cfg.lambda_n * terms["normal"]
    )
    if not np.isfinite(total):
        raise NonFiniteLossError("total")
    return total, terms, grads
