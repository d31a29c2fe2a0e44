"""Coarse-to-fine refinement driver.

Builds an image pyramid over the aligned pair, runs Adam on the graph loss at
each level (coarsest first), and carries the solution down by upsampling the
displacement relative to each level's own initialization. Adam moments reset
at every level; level 0 of the pyramid is the input pair itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    CameraModel,
    CorrespondenceSet,
    PixelGrid,
    PointMap,
    RefinementConfig,
    ScenePair,
    ViewBundle,
)
from .graph import (
    RefinementGraph,
    RefinementState,
    StateGrads,
    build_graph,
    refresh_knn,
    total_loss_and_grad,
)
from .normals import DEGENERATE_NORM, normals_from_pointmap

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Normals drift off unit length as they receive gradient steps. They are
# renormalized only past this tolerance so a zero-gradient run leaves the
# state bitwise untouched.
RENORM_TOL = 1e-12


@dataclass
class LevelSummary:
    level: int
    iterations: int
    initial_total: float
    final_total: float


@dataclass
class RefinementResult:
    state: RefinementState
    trace: list
    levels: list


class _AdamVar:
    """First/second moment pair for one parameter tensor (or scalar)."""

    def __init__(self, shape):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)

    def update(self, grad, lr: float, t: int):
        self.m = ADAM_BETA1 * self.m + (1.0 - ADAM_BETA1) * grad
        self.v = ADAM_BETA2 * self.v + (1.0 - ADAM_BETA2) * grad * grad
        m_hat = self.m / (1.0 - ADAM_BETA1**t)
        v_hat = self.v / (1.0 - ADAM_BETA2**t)
        return lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


class AdamOptimizer:
    """Adam over the full refinement state. Moments start at zero."""

    def __init__(self, state: RefinementState, learning_rate: float):
        self.lr = learning_rate
        self.t = 0
        self.vars = {
            "points_ref": _AdamVar(state.points_ref.shape),
            "points_src": _AdamVar(state.points_src.shape),
            "normals_ref": _AdamVar(state.normals_ref.shape),
            "normals_src": _AdamVar(state.normals_src.shape),
            "s_ref": _AdamVar(()),
            "s_src": _AdamVar(()),
        }

    def step(self, state: RefinementState, grads: StateGrads) -> None:
        self.t += 1
        state.points_ref -= self.vars["points_ref"].update(grads.points_ref, self.lr, self.t)
        state.points_src -= self.vars["points_src"].update(grads.points_src, self.lr, self.t)
        state.normals_ref -= self.vars["normals_ref"].update(grads.normals_ref, self.lr, self.t)
        state.normals_src -= self.vars["normals_src"].update(grads.normals_src, self.lr, self.t)
        state.s_ref -= float(self.vars["s_ref"].update(grads.s_ref, self.lr, self.t))
        state.s_src -= float(self.vars["s_src"].update(grads.s_src, self.lr, self.t))


def _renormalize(state: RefinementState) -> None:
    for normals, valid in (
        (state.normals_ref, state.valid_ref),
        (state.normals_src, state.valid_src),
    ):
        rows = normals[valid]
        norms = np.linalg.norm(rows, axis=1)
        off = np.abs(norms - 1.0) > RENORM_TOL
        if not off.any():
            continue
        scale = np.ones_like(norms)
        fixable = off & (norms > DEGENERATE_NORM)
        scale[fixable] = 1.0 / norms[fixable]
        normals[valid] = rows * scale[:, None]


def _block_mean(a: np.ndarray) -> np.ndarray:
    h2, w2 = a.shape[0] // 2, a.shape[1] // 2
    a = a[: h2 * 2, : w2 * 2]
    blocks = a.reshape(h2, 2, w2, 2, *a.shape[2:]).swapaxes(1, 2)
    return blocks.mean(axis=(2, 3))


def _blocks(a: np.ndarray) -> np.ndarray:
    """(H, W, ...) -> (H//2, W//2, 4, ...), trailing odd rows/cols dropped."""
    h2, w2 = a.shape[0] // 2, a.shape[1] // 2
    rest = a.shape[2:]
    a = a[: h2 * 2, : w2 * 2]
    return a.reshape(h2, 2, w2, 2, *rest).swapaxes(1, 2).reshape(h2, w2, 4, *rest)


def _halve_view(view: ViewBundle) -> ViewBundle:
    """One pyramid halving: confidence-weighted point mean, plain image mean,
    normals re-estimated at the new resolution."""
    h2 = view.grid.height // 2
    w2 = view.grid.width // 2
    grid2 = PixelGrid(width=w2, height=h2)

    pts = _blocks(view.pointmap.points.astype(np.float64))        # (h2, w2, 4, 3)
    val = _blocks(view.pointmap.valid)                            # (h2, w2, 4)
    conf = _blocks(view.pointmap.confidence.astype(np.float64))   # (h2, w2, 4)

    weights = np.where(val, conf, 0.0)
    wsum = weights.sum(axis=2)
    counts = val.sum(axis=2)
    valid2 = counts > 0

    # Plain mean over the valid sources backs up zero-weight blocks.
    masked = np.where(val[..., None], pts, 0.0)
    plain = masked.sum(axis=2) / np.maximum(counts, 1)[..., None]
    weighted = (pts * weights[..., None]).sum(axis=2) / np.where(wsum > 0, wsum, 1.0)[..., None]
    pts2 = np.where((wsum > 0)[..., None], weighted, plain)
    pts2[~valid2] = 0.0

    conf2 = np.where(val, conf, 0.0).sum(axis=2) / np.maximum(counts, 1)
    conf2[~valid2] = 0.0

    image2 = _block_mean(view.image.astype(np.float64))

    k2 = view.camera.k.copy()
    k2[0] *= 0.5
    k2[1] *= 0.5
    cam2 = CameraModel(k2, view.camera.rotation, view.camera.translation)

    pm2 = PointMap(grid2, pts2, valid2, conf2)
    return ViewBundle(image2, pm2, cam2, normals_from_pointmap(pm2, cam2))


def _level_matches(matches: CorrespondenceSet, level: int,
                   shape_ref, shape_src) -> CorrespondenceSet:
    """Inlier matches mapped to pyramid level `level`: divide, round to the
    pixel grid, clamp, and drop duplicates keeping first occurrence."""
    keep = matches.inlier
    scale = float(2**level)
    rp = matches.ref_pixels[keep] / scale
    sp = matches.src_pixels[keep] / scale
    rp = np.stack(
        [np.clip(np.rint(rp[:, 0]), 0, shape_ref[0] - 1),
         np.clip(np.rint(rp[:, 1]), 0, shape_ref[1] - 1)], axis=1)
    sp = np.stack(
        [np.clip(np.rint(sp[:, 0]), 0, shape_src[0] - 1),
         np.clip(np.rint(sp[:, 1]), 0, shape_src[1] - 1)], axis=1)
    key = np.concatenate([rp, sp], axis=1)
    _, first = np.unique(key, axis=0, return_index=True)
    order = np.sort(first)
    return CorrespondenceSet(rp[order], sp[order], np.ones(order.size, dtype=bool))


def build_pyramid(pair: ScenePair, cfg: RefinementConfig) -> list:
    """ScenePairs from coarsest to finest. The finest entry is `pair` itself
    (original points, normals, and subpixel matches untouched)."""
    views = {"ref": pair.ref, "src": pair.src}
    levels = [pair]
    for level in range(1, cfg.levels):
        views = {name: _halve_view(v) for name, v in views.items()}
        for v in views.values():
            if v.grid.width < 2 or v.grid.height < 2:
                raise ValueError("pyramid level smaller than 2x2; reduce levels")
        matches = _level_matches(
            pair.matches, level, views["ref"].grid.shape, views["src"].grid.shape
        )
        levels.append(ScenePair(views["ref"], views["src"], matches))
    return levels[::-1]


def _bilinear_delta(field: np.ndarray, fine_shape) -> np.ndarray:
    """Upsample a coarse (h, w, 3) field to fine_shape by bilinear blending.

    Fine pixel centers land at coarse coordinate x/2 - 0.25. The cell index is
    clamped inside the grid but the fractional weights are not, so border
    pixels extrapolate linearly instead of flattening out.
    """
    hc, wc = field.shape[:2]
    hf, wf = fine_shape
    rf = np.arange(hf, dtype=np.float64) / 2.0 - 0.25
    cf = np.arange(wf, dtype=np.float64) / 2.0 - 0.25
    r0 = np.clip(np.floor(rf).astype(np.intp), 0, hc - 2)
    c0 = np.clip(np.floor(cf).astype(np.intp), 0, wc - 2)
    tr = (rf - r0)[:, None, None]
    tc = (cf - c0)[None, :, None]
    f00 = field[r0][:, c0]
    f01 = field[r0][:, c0 + 1]
    f10 = field[r0 + 1][:, c0]
    f11 = field[r0 + 1][:, c0 + 1]
    return (
        (1.0 - tr) * (1.0 - tc) * f00
        + (1.0 - tr) * tc * f01
        + tr * (1.0 - tc) * f10
        + tr * tc * f11
    )


def upsample_state(
    coarse: RefinementState,
    coarse_init: RefinementState,
    fine_init: RefinementState,
) -> RefinementState:
    """Carry a coarse solution to the next finer level.

    Point and normal displacements (relative to the coarse initialization) are
    bilinearly upsampled and added onto the finer initialization; per-view
    scales transfer directly. Normals are renormalized where the blend left
    them off unit length.
    """
    state = fine_init.copy()
    state.s_ref = coarse.s_ref
    state.s_src = coarse.s_src
    for view in ("ref", "src"):
        fshape = state.valid(view).shape
        fvalid = state.valid(view)
        dp = _bilinear_delta(coarse.points(view) - coarse_init.points(view), fshape)
        state.points(view)[fvalid] += dp[fvalid]
        dn = _bilinear_delta(coarse.normals(view) - coarse_init.normals(view), fshape)
        blended = state.normals(view)[fvalid] + dn[fvalid]
        norms = np.linalg.norm(blended, axis=1)
        ok = norms > DEGENERATE_NORM
        blended[ok] /= norms[ok, None]
        blended[~ok] = state.normals(view)[fvalid][~ok]
        state.normals(view)[fvalid] = blended
    return state


def _trace_row(iteration: int, level: int, terms: dict, total: float) -> dict:
    row = {"iter": iteration, "level": level, "total": total}
    row.update(terms)
    return row


def run_refinement(pair: ScenePair, cfg: RefinementConfig) -> RefinementResult:
    """Optimize the aligned world-frame pair.

    `pair` must carry normals on both views. Returns the refined state, the
    per-iteration loss trace (initial evaluation first, then one row per step
    with post-step values), and per-level summaries.
    """
    pyramid = build_pyramid(pair, cfg)
    trace: list = []
    summaries: list = []
    state = None
    prev_init = None
    iteration = 0

    for pos, level_pair in enumerate(pyramid):
        level = cfg.levels - 1 - pos
        init = RefinementState.from_pair(level_pair)
        if state is None:
            state = init.copy()
        else:
            state = upsample_state(state, prev_init, init)
        prev_init = init

        graph = build_graph(level_pair, state, cfg)
        total, terms, grads = total_loss_and_grad(state, graph, cfg)
        if pos == 0:
            trace.append(_trace_row(0, level, terms, total))
        initial_total = total

        adam = AdamOptimizer(state, cfg.learning_rate)
        n_steps = cfg.iters_per_level[pos]
        for t in range(1, n_steps + 1):
            if t > 1 and (t - 1) % cfg.knn_refresh_every == 0:
                graph = refresh_knn(graph, state, cfg)
                total, terms, grads = total_loss_and_grad(state, graph, cfg)
            adam.step(state, grads)
            _renormalize(state)
            total, terms, grads = total_loss_and_grad(state, graph, cfg)
            iteration += 1
            trace.append(_trace_row(iteration, level, terms, total))

        summaries.append(LevelSummary(level, n_steps, initial_total, total))

    return RefinementResult(state=state, trace=trace, levels=summaries)
