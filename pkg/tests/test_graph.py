"""Graph construction and loss terms, checked against loop-based oracles."""

import numpy as np
import pytest

from more3d import (
    CameraModel,
    CorrespondenceSet,
    GraphBuildError,
    NonFiniteLossError,
    NormalMap,
    PixelGrid,
    PointMap,
    RefinementConfig,
    RefinementState,
    ScenePair,
    StateGrads,
    ViewBundle,
    build_graph,
    loss_inter,
    loss_intra,
    loss_knn,
    loss_normal_prior,
    loss_ray,
    loss_similarity,
    prepare_world_pair,
    refresh_knn,
    total_loss_and_grad,
    weight_2d,
    weight_3d,
)
from more3d.graph import SMOOTH_EPS, W3D_FLOOR, smooth_norm

from helpers import small_sphere_scene


def sphere_state(width=8, height=6, seed=11, noise=0.01):
    pair, _ = small_sphere_scene(width, height, noise_sigma=noise, seed=seed)
    world = prepare_world_pair(pair)
    return world, RefinementState.from_pair(world)


def perturbed_setup(seed=7, scale_ref=1.07, scale_src=0.93):
    """Graph from the initial state, then a state nudged off the priors so
    every loss term is active."""
    world, state = sphere_state()
    cfg = RefinementConfig()
    graph = build_graph(world, state, cfg)
    rng = np.random.default_rng(seed)
    state.points_ref = state.points_ref + rng.normal(0.0, 0.02, state.points_ref.shape)
    state.points_src = state.points_src + rng.normal(0.0, 0.02, state.points_src.shape)
    state.normals_ref = state.normals_ref + rng.normal(0.0, 0.02, state.normals_ref.shape)
    state.normals_src = state.normals_src + rng.normal(0.0, 0.02, state.normals_src.shape)
    state.s_ref = scale_ref
    state.s_src = scale_src
    return world, state, graph, cfg


def sn(x, eps=SMOOTH_EPS):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim and x.shape[-1] == 3:
        return np.sqrt((x * x).sum(axis=-1) + eps * eps)
    return np.sqrt(x * x + eps * eps)


# ---------------------------------------------------------------------------
# smooth norm and edge weights


def test_smooth_norm_values():
    z = smooth_norm(np.zeros((4, 3)))
    np.testing.assert_allclose(z, SMOOTH_EPS, rtol=1e-12)
    v = smooth_norm(np.array([[3.0, 4.0, 0.0]]))
    np.testing.assert_allclose(v, [5.0], rtol=1e-12)
    s = smooth_norm(np.array([-2.0, 0.5]), eps=0.1)
    np.testing.assert_allclose(s, np.sqrt([4.01, 0.26]), rtol=1e-12)


def w2d_oracle(image, la, lb, cfg):
    """weight_2d recomputed with explicit loops."""
    ra, ca = int(round(la[0])), int(round(la[1]))
    rb, cb = int(round(lb[0])), int(round(lb[1]))
    radius = cfg.patch_radius
    h, w = image.shape[:2]
    sq = 0.0
    count = 0
    for dr in range(-radius, radius + 1):
        for dc in range(-radius, radius + 1):
            ya, xa, yb, xb = ra + dr, ca + dc, rb + dr, cb + dc
            if 0 <= ya < h and 0 <= xa < w and 0 <= yb < h and 0 <= xb < w:
                diff = image[ya, xa].astype(np.float64) - image[yb, xb]
                sq += float((diff * diff).sum())
                count += 1
    k = 2 * radius + 1
    sq *= (k * k) / max(count, 1)
    sp = (la[0] - lb[0]) ** 2 + (la[1] - lb[1]) ** 2
    return np.exp(-sq / (2.0 * cfg.sigma_int**2)) * np.exp(-sp / (2.0 * cfg.sigma_spa**2))


def test_weight_2d_matches_loop_oracle():
    rng = np.random.default_rng(21)
    image = rng.uniform(0.0, 1.0, (9, 7, 3))
    cfg = RefinementConfig()
    cases = [
        ((4.0, 3.0), (4.0, 4.0)),
        ((4.2, 3.1), (3.6, 4.4)),   # subpixel positions, same rounded patches
        ((0.0, 0.0), (1.0, 1.0)),   # corner patches are clipped
        ((8.0, 6.0), (7.0, 6.0)),
        ((0.4, 6.2), (1.3, 5.0)),
    ]
    for la, lb in cases:
        got = weight_2d(image, la, lb, cfg)
        want = w2d_oracle(image, la, lb, cfg)
        np.testing.assert_allclose(got, want, rtol=1e-12)


def test_weight_2d_interior_is_plain_patch_difference():
    rng = np.random.default_rng(3)
    image = rng.uniform(0.0, 1.0, (8, 8, 3))
    cfg = RefinementConfig()
    la, lb = (3, 3), (4, 5)
    pa = image[2:5, 2:5]
    pb = image[3:6, 4:7]
    sq = float(((pa - pb) ** 2).sum())
    sp = 1.0 + 4.0
    want = np.exp(-sq / (2 * cfg.sigma_int**2)) * np.exp(-sp / (2 * cfg.sigma_spa**2))
    np.testing.assert_allclose(weight_2d(image, la, lb, cfg), want, rtol=1e-12)


def test_weight_2d_identical_position_is_one():
    rng = np.random.default_rng(4)
    image = rng.uniform(0.0, 1.0, (6, 6, 3))
    assert weight_2d(image, (2.0, 3.0), (2.0, 3.0), RefinementConfig()) == pytest.approx(1.0)


def test_weight_3d_formula_and_floor():
    cfg = RefinementConfig()
    ci, cj = np.array([0.2, 0.4, 0.6]), np.array([0.25, 0.35, 0.65])
    ni, nj = np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.1, np.sqrt(0.99)])
    s2 = 2.0 * cfg.sigma_int**2
    want = np.exp(-float(((ci - cj) ** 2).sum()) / s2) * np.exp(
        -float(((ni - nj) ** 2).sum()) / s2
    )
    np.testing.assert_allclose(weight_3d(ci, cj, ni, nj, cfg), want, rtol=1e-12)
    # identical inputs give exactly one
    assert weight_3d(ci, ci, ni, ni, cfg) == 1.0
    # far-apart colors underflow the floor and clamp to an exact zero
    far = np.array([100.0, 0.0, 0.0])
    assert weight_3d(ci, far, ni, ni, cfg) == 0.0
    tiny = np.exp(-70.0 / s2) ** 2
    assert tiny < W3D_FLOOR


# ---------------------------------------------------------------------------
# graph construction


def test_intra_edges_match_enumeration_oracle():
    world, state = sphere_state()
    cfg = RefinementConfig()
    graph = build_graph(world, state, cfg)
    for view, bundle in (("ref", world.ref), ("src", world.src)):
        valid = state.valid(view)
        h, w = valid.shape
        want = {}
        for r in range(h):
            for c in range(w):
                if not valid[r, c]:
                    continue
                for dr in range(-1, 2):
                    for dc in range(-1, 2):
                        if (dr, dc) == (0, 0):
                            continue
                        r2, c2 = r + dr, c + dc
                        if 0 <= r2 < h and 0 <= c2 < w and valid[r2, c2]:
                            want[(r * w + c, r2 * w + c2)] = w2d_oracle(
                                bundle.image, (r, c), (r2, c2), cfg
                            )
        e = graph.intra(view)
        got = dict(zip(zip(e.a.tolist(), e.b.tolist()), e.w.tolist()))
        assert set(got) == set(want)
        for key in want:
            assert got[key] == pytest.approx(want[key], rel=1e-12)


def hand_pair(invalidate_src=None):
    """5x5 all-valid pair with one centered match; optionally knock out one
    source pixel to exercise the validity gating."""
    rng = np.random.default_rng(17)
    grid = PixelGrid(width=5, height=5)
    k = np.array([[5.0, 0.0, 2.5], [0.0, 5.0, 2.5], [0.0, 0.0, 1.0]])
    views = []
    for dx in (0.0, 0.3):
        image = rng.uniform(0.2, 0.8, (5, 5, 3))
        points = rng.normal(0.0, 1.0, (5, 5, 3)) + np.array([0.0, 0.0, 4.0])
        normals = np.zeros((5, 5, 3))
        normals[..., 2] = -1.0
        valid = np.ones((5, 5), dtype=bool)
        cam = CameraModel(k, np.eye(3), np.array([dx, 0.0, 0.0]))
        views.append(
            ViewBundle(
                image=image,
                pointmap=PointMap(grid, points, valid, np.ones((5, 5))),
                camera=cam,
                normals=NormalMap(grid, normals, valid),
            )
        )
    matches = CorrespondenceSet(
        np.array([[2.0, 2.0]]), np.array([[2.0, 2.0]]), np.array([True])
    )
    pair = ScenePair(ref=views[0], src=views[1], matches=matches)
    state = RefinementState.from_pair(pair)
    if invalidate_src is not None:
        state.valid_src[invalidate_src] = False
    return pair, state


def test_inter_edges_all_valid_counts():
    pair, state = hand_pair()
    graph = build_graph(pair, state, RefinementConfig())
    # full 3x3 window around the match on both sides, center included
    assert graph.inter_first_ref.a.size == 9
    assert graph.inter_first_src.a.size == 9
    assert graph.inter_pair.i.size == 9
    # every first-sum edge hangs off the rounded anchor pixel
    assert set(graph.inter_first_ref.a.tolist()) == {2 * 5 + 2}
    assert set(graph.inter_first_src.a.tolist()) == {2 * 5 + 2}


def test_inter_edges_respect_validity():
    pair, state = hand_pair(invalidate_src=(2, 3))
    graph = build_graph(pair, state, RefinementConfig())
    # the src window lost one pixel; the ref window is untouched
    assert graph.inter_first_ref.a.size == 8
    assert graph.inter_first_src.a.size == 9
    # the paired offset whose src endpoint died drops out too
    assert graph.inter_pair.i.size == 8
    assert 2 * 5 + 3 not in set(graph.inter_first_ref.b.tolist())
    assert 2 * 5 + 3 not in set(graph.inter_pair.j2.tolist())


def test_inter_anchor_requires_both_valid():
    pair, state = hand_pair(invalidate_src=(2, 2))
    graph = build_graph(pair, state, RefinementConfig())
    # the only match lost its src endpoint, so no inter edges at all
    assert graph.inter_first_ref.a.size == 0
    assert graph.inter_first_src.a.size == 0
    assert graph.inter_pair.i.size == 0


def test_build_graph_all_invalid_raises():
    pair, state = hand_pair()
    state.valid_ref[:] = False
    state.valid_src[:] = False
    with pytest.raises(GraphBuildError):
        build_graph(pair, state, RefinementConfig())


def test_ray_anchors_and_priors_content():
    world, state = sphere_state()
    cfg = RefinementConfig()
    graph = build_graph(world, state, cfg)
    for view, bundle in (("ref", world.ref), ("src", world.src)):
        rays = graph.rays(view)
        np.testing.assert_array_equal(rays.origin, bundle.camera.center)
        np.testing.assert_array_equal(rays.idx, np.flatnonzero(state.valid(view).ravel()))
        np.testing.assert_allclose(
            np.linalg.norm(rays.dirs, axis=1), 1.0, rtol=0, atol=1e-12
        )
        pr = graph.priors(view)
        pts = bundle.pointmap.points.reshape(-1, 3)
        np.testing.assert_allclose(pr.centroid, pts[pr.idx].mean(axis=0), rtol=1e-12)
        np.testing.assert_allclose(pr.bdist, sn(pts - pr.centroid), rtol=1e-12)
        np.testing.assert_array_equal(pr.nbar, bundle.normals.normals.reshape(-1, 3))
        # all confidences are 1 here, so the mask weights equal the validity
        np.testing.assert_array_equal(pr.m, state.valid(view).ravel().astype(float))


def brute_knn_pairs(state, qview, sview, k):
    qidx = np.flatnonzero(state.valid(qview).ravel())
    sidx = np.flatnonzero(state.valid(sview).ravel())
    qpts = state.points(qview).reshape(-1, 3)[qidx]
    spts = state.points(sview).reshape(-1, 3)[sidx]
    d = ((qpts[:, None, :] - spts[None, :, :]) ** 2).sum(axis=-1)
    nn = np.argsort(d, axis=1, kind="stable")[:, : min(k, sidx.size)]
    return {
        (int(qi), int(sidx[j])) for row, qi in zip(nn, qidx) for j in row
    }


def test_knn_edges_match_brute_force():
    world, state = sphere_state(width=12, height=9, seed=3, noise=0.02)
    cfg = RefinementConfig()
    graph = build_graph(world, state, cfg)
    for view, edges in (("ref", graph.knn_ref), ("src", graph.knn_src)):
        other = "src" if view == "ref" else "ref"
        got = set(zip(edges.a.tolist(), edges.b.tolist()))
        assert got == brute_knn_pairs(state, view, other, cfg.knn_k)
        # weights agree with the scalar recipe, edge by edge
        cq = graph.colors_ref if view == "ref" else graph.colors_src
        cs = graph.colors_src if view == "ref" else graph.colors_ref
        nq = state.normals(view).reshape(-1, 3)
        ns = state.normals(other).reshape(-1, 3)
        for a, b, w in zip(edges.a[:40], edges.b[:40], edges.w[:40]):
            assert w == pytest.approx(weight_3d(cq[a], cs[b], nq[a], ns[b], cfg), rel=1e-12)


def test_refresh_knn_touches_only_knn_edges():
    world, state, graph, cfg = perturbed_setup()
    new = refresh_knn(graph, state, cfg)
    assert new.intra_ref is graph.intra_ref
    assert new.inter_first_ref is graph.inter_first_ref
    assert new.inter_pair is graph.inter_pair
    assert new.rays_src is graph.rays_src
    assert new.priors_ref is graph.priors_ref
    got = set(zip(new.knn_ref.a.tolist(), new.knn_ref.b.tolist()))
    assert got == brute_knn_pairs(state, "ref", "src", cfg.knn_k)


# ---------------------------------------------------------------------------
# loss values against direct recomputation


def test_loss_intra_value_recompute():
    world, state, graph, cfg = perturbed_setup()
    for view in ("ref", "src"):
        e = graph.intra(view)
        pts = state.points(view).reshape(-1, 3)
        nrm = state.normals(view).reshape(-1, 3)
        u = (nrm[e.a] * (pts[e.b] - pts[e.a])).sum(axis=1)
        want = (e.w * (sn(u) + cfg.gamma * sn(nrm[e.b] - nrm[e.a]))).sum()
        got = loss_intra(state, graph, view, cfg.gamma)
        assert got == pytest.approx(want, rel=1e-12)


def test_loss_inter_value_recompute():
    world, state, graph, cfg = perturbed_setup()
    pr = state.points_ref.reshape(-1, 3)
    nr = state.normals_ref.reshape(-1, 3)
    ps = state.points_src.reshape(-1, 3)
    ns = state.normals_src.reshape(-1, 3)
    e = graph.inter_first_ref
    u = (nr[e.a] * (ps[e.b] - pr[e.a])).sum(axis=1)
    want = (e.w * (sn(u) + cfg.gamma * sn(ns[e.b] - nr[e.a]))).sum()
    pe = graph.inter_pair
    u2 = (nr[pe.i] * (pr[pe.i2] - ps[pe.j2])).sum(axis=1)
    want += (cfg.rho * pe.w * (sn(u2) + 0.5 * cfg.gamma * sn(nr[pe.i] - ns[pe.j]))).sum()
    got = loss_inter(state, graph, "ref", cfg.gamma, cfg.rho)
    assert got == pytest.approx(want, rel=1e-12)


def test_loss_knn_value_recompute():
    world, state, graph, cfg = perturbed_setup()
    e = graph.knn_ref
    pr = state.points_ref.reshape(-1, 3)
    nr = state.normals_ref.reshape(-1, 3)
    ps = state.points_src.reshape(-1, 3)
    ns = state.normals_src.reshape(-1, 3)
    d = pr[e.a] - ps[e.b]
    u1 = (nr[e.a] * d).sum(axis=1)
    u2 = -(ns[e.b] * d).sum(axis=1)
    want = (e.w * (sn(u1) + sn(u2) + sn(nr[e.a] - ns[e.b]))).sum()
    assert loss_knn(state, graph, "ref") == pytest.approx(want, rel=1e-12)


def test_loss_ray_value_and_anchored_minimum():
    world, state, graph, cfg = perturbed_setup()
    rays = graph.rays("src")
    p = state.points_src.reshape(-1, 3)[rays.idx]
    c = np.cross(rays.dirs[rays.idx], p - rays.origin)
    want = np.sqrt((c * c).sum(axis=1) + SMOOTH_EPS**2).sum()
    assert loss_ray(state, graph, "src") == pytest.approx(want, rel=1e-12)
    # noise-free points sit on their rays, up to the smoothing floor
    fresh_world, fresh = sphere_state(noise=0.0)
    fresh_graph = build_graph(fresh_world, fresh, cfg)
    n = fresh_graph.rays("ref").idx.size
    floor = n * SMOOTH_EPS
    assert loss_ray(fresh, fresh_graph, "ref") == pytest.approx(floor, rel=1e-6)


def test_loss_similarity_value_recompute():
    world, state, graph, cfg = perturbed_setup()
    pr = graph.priors("ref")
    p = state.points_ref.reshape(-1, 3)[pr.idx]
    a = sn(p - pr.centroid)
    u = a - state.s_ref * pr.bdist[pr.idx]
    want = (pr.m[pr.idx] * sn(u)).sum()
    assert loss_similarity(state, graph, "ref") == pytest.approx(want, rel=1e-12)


def test_loss_normal_prior_value_recompute():
    world, state, graph, cfg = perturbed_setup()
    pr = graph.priors("src")
    n = state.normals_src.reshape(-1, 3)[pr.idx]
    want = (pr.m[pr.idx] * sn(n - pr.nbar[pr.idx])).sum()
    assert loss_normal_prior(state, graph, "src") == pytest.approx(want, rel=1e-12)


def test_loss_eps_parameter_flows_through():
    world, state, graph, cfg = perturbed_setup()
    eps = 0.05
    e = graph.knn_ref
    pr = state.points_ref.reshape(-1, 3)
    nr = state.normals_ref.reshape(-1, 3)
    ps = state.points_src.reshape(-1, 3)
    ns = state.normals_src.reshape(-1, 3)
    d = pr[e.a] - ps[e.b]
    u1 = (nr[e.a] * d).sum(axis=1)
    u2 = -(ns[e.b] * d).sum(axis=1)
    want = (e.w * (sn(u1, eps) + sn(u2, eps) + sn(nr[e.a] - ns[e.b], eps))).sum()
    assert loss_knn(state, graph, "ref", eps=eps) == pytest.approx(want, rel=1e-12)


# ---------------------------------------------------------------------------
# totals and gradients


def test_total_is_weighted_recombination():
    world, state, graph, cfg = perturbed_setup()
    total, terms, grads = total_loss_and_grad(state, graph, cfg)
    want_terms = {
        "intra": loss_intra(state, graph, "ref", cfg.gamma)
        + loss_intra(state, graph, "src", cfg.gamma),
        "inter": loss_inter(state, graph, "ref", cfg.gamma, cfg.rho)
        + loss_inter(state, graph, "src", cfg.gamma, cfg.rho),
        "knn": loss_knn(state, graph, "ref") + loss_knn(state, graph, "src"),
        "ray": loss_ray(state, graph, "ref") + loss_ray(state, graph, "src"),
        "sim": loss_similarity(state, graph, "ref")
        + loss_similarity(state, graph, "src"),
        "normal": loss_normal_prior(state, graph, "ref")
        + loss_normal_prior(state, graph, "src"),
    }
    for name, want in want_terms.items():
        assert terms[name] == pytest.approx(want, rel=1e-12)
    want_total = (
        cfg.lambda_p * (terms["intra"] + terms["inter"] + terms["knn"])
        + cfg.lambda_r * terms["ray"]
        + cfg.lambda_s * terms["sim"]
        + cfg.lambda_n * terms["normal"]
    )
    assert total == pytest.approx(want_total, rel=1e-12)
    assert grads is not None
    assert total_loss_and_grad(state, graph, cfg, with_grads=False)[2] is None


def entry_views(state):
    return (
        ("points_ref", state.points_ref, state.valid_ref),
        ("points_src", state.points_src, state.valid_src),
        ("normals_ref", state.normals_ref, state.valid_ref),
        ("normals_src", state.normals_src, state.valid_src),
    )


def test_total_gradient_matches_finite_differences():
    world, state, graph, cfg = perturbed_setup()
    _, _, grads = total_loss_and_grad(state, graph, cfg)

    def total_at(s):
        return total_loss_and_grad(s, graph, cfg, with_grads=False)[0]

    rng = np.random.default_rng(5)
    h = 1e-5
    checked = 0
    for name, arr, valid in entry_views(state):
        garr = getattr(grads, name)
        rows = np.flatnonzero(valid.ravel())
        for row in rng.choice(rows, size=8, replace=False):
            r, c = divmod(int(row), valid.shape[1])
            axis = int(rng.integers(0, 3))
            probe = state.copy()
            getattr(probe, name)[r, c, axis] += h
            up = total_at(probe)
            probe = state.copy()
            getattr(probe, name)[r, c, axis] -= h
            down = total_at(probe)
            fd = (up - down) / (2 * h)
            ana = garr[r, c, axis]
            assert fd == pytest.approx(ana, rel=1e-4, abs=1e-7), (name, r, c, axis)
            checked += 1
    for name in ("s_ref", "s_src"):
        probe = state.copy()
        setattr(probe, name, getattr(state, name) + h)
        up = total_at(probe)
        probe = state.copy()
        setattr(probe, name, getattr(state, name) - h)
        down = total_at(probe)
        fd = (up - down) / (2 * h)
        assert fd == pytest.approx(getattr(grads, name), rel=1e-4), name
        checked += 1
    assert checked == 34


def test_similarity_scale_gradient_direct():
    world, state, graph, cfg = perturbed_setup()
    g = StateGrads.zeros_like(state)
    loss_similarity(state, graph, "ref", grads=g, grad_scale=1.0)
    assert g.s_src == 0.0
    h = 1e-6
    hi, lo = state.copy(), state.copy()
    hi.s_ref += h
    lo.s_ref -= h
    fd = (loss_similarity(hi, graph, "ref") - loss_similarity(lo, graph, "ref")) / (2 * h)
    assert g.s_ref == pytest.approx(fd, rel=1e-6)


def test_grad_scale_multiplies_gradients():
    world, state, graph, cfg = perturbed_setup()
    g1 = StateGrads.zeros_like(state)
    loss_knn(state, graph, "ref", grads=g1, grad_scale=1.0)
    g2 = StateGrads.zeros_like(state)
    loss_knn(state, graph, "ref", grads=g2, grad_scale=7.0)
    np.testing.assert_allclose(g2.points_ref, 7.0 * g1.points_ref, rtol=1e-12)
    np.testing.assert_allclose(g2.normals_src, 7.0 * g1.normals_src, rtol=1e-12)


def test_nonfinite_loss_names_offending_term():
    world, state, graph, cfg = perturbed_setup()
    bad = state.copy()
    row = np.flatnonzero(bad.valid_ref.ravel())[0]
    bad.normals_ref.reshape(-1, 3)[row] = np.nan
    with pytest.raises(NonFiniteLossError) as exc:
        total_loss_and_grad(bad, graph, cfg)
    assert exc.value.term == "intra"

    bad = state.copy()
    bad.s_ref = np.inf
    with np.errstate(invalid="ignore"):
        with pytest.raises(NonFiniteLossError) as exc:
            total_loss_and_grad(bad, graph, cfg)
    assert exc.value.term == "sim"
