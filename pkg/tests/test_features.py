import itertools
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from loopmatch.core import DegenerateGeometryError, FeatureConfig, MissingDescriptorsError, Scene, TemplateShape
from loopmatch.features import (
    AdjacencyGraph,
    MatchContext,
    ShapeContextConfig,
    adjacency_feature,
    angle,
    clique_feature,
    clique_tensor,
    collapse_unary,
    d1,
    d2,
    delaunay,
    loop_pairs,
    phi0,
    phi1,
    phi2,
    phi3,
    shape_context,
    shape_contexts,
    unary_cost_matrix,
    unary_feature_matrix,
    with_shape_context,
)

from conftest import random_scene

coord = st.floats(-1000, 1000, allow_nan=False)
point = st.tuples(coord, coord)


# ---- standalone oracles: plain-math re-statements of each feature

def o_dist(a, b):
    return math.sqrt((a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2)


def o_d2(a, b, c):
    return o_dist(a, b) / ((o_dist(a, b) + o_dist(b, c) + o_dist(a, c)) / 3)


def o_angle(a, b, c):
    u = (a[0] - b[0], a[1] - b[1])
    v = (c[0] - b[0], c[1] - b[1])
    cosv = (u[0] * v[0] + u[1] * v[1]) / (math.hypot(*u) * math.hypot(*v))
    return math.acos(max(-1.0, min(1.0, cosv)))


def similarity(rng, scale=None):
    th = rng.uniform(0, 2 * np.pi)
    R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    if rng.random() < 0.5:
        R = R @ np.diag([1.0, -1.0])
    s = rng.uniform(0.2, 5) if scale is None else scale
    t = rng.uniform(-100, 100, size=2)
    return lambda P: s * (np.asarray(P, float) @ R.T) + t


# ---- d1 / phi1

def test_d1_examples():
    assert d1((0, 0), (0, 0), 5) == 0
    assert d1((0, 0), (3, 4), 10) == 0.5
    assert d1((1, 2), (7, 10), 640) == 10 / 640
    with pytest.raises(ValueError):
        d1((0, 0), (1, 1), 0)


def test_phi1_examples():
    assert phi1((0, 0), (3, 4), (10, 10), (13, 14), 100, 100) == 0
    # d1(s)=0.5, d1(y)=0.3
    assert phi1((0, 0), (5, 0), (0, 0), (3, 0), 10, 10) == pytest.approx(0.04, abs=1e-15)


@given(point, point, point, point, st.floats(1, 2000), st.floats(1, 2000))
@settings(max_examples=200)
def test_phi1_oracle(s1, s2, y1, y2, wt, wu):
    expect = (o_dist(s1, s2) / wt - o_dist(y1, y2) / wu) ** 2
    assert phi1(s1, s2, y1, y2, wt, wu) == pytest.approx(expect, rel=1e-12, abs=1e-12)


def test_phi1_isometry_invariance():
    rng = np.random.default_rng(1)
    for _ in range(300):
        s = rng.uniform(0, 500, size=(2, 2))
        y = rng.uniform(0, 500, size=(2, 2))
        T = similarity(rng, scale=1.0)
        ty = T(y)
        assert abs(phi1(*s, *y, 640, 640) - phi1(*s, *ty, 640, 640)) < 1e-9


# ---- d2 / phi2

def test_d2_examples():
    eq = [(0, 0), (1, 0), (0.5, math.sqrt(3) / 2)]
    for a, b, c in itertools.permutations(eq):
        assert d2(a, b, c) == pytest.approx(1.0, abs=1e-12)
    assert d2((0, 0), (2, 0), (1, 0)) == pytest.approx(1.5, abs=1e-15)
    assert d2((0, 0), (14, 0), (7, 0)) == pytest.approx(1.5, abs=1e-15)
    with pytest.raises(DegenerateGeometryError):
        d2((1, 1), (1, 1), (1, 1))


def test_phi2_examples():
    rng = np.random.default_rng(2)
    s = rng.uniform(0, 100, size=(3, 2))
    y = similarity(rng)(s)
    assert phi2(*s, *y) < 1e-20
    # d2(s) = 1.5, d2(y) = 1
    eq = [(0, 0), (1, 0), (0.5, math.sqrt(3) / 2)]
    assert phi2((0, 0), (2, 0), (1, 0), *eq) == pytest.approx(0.25, abs=1e-12)


@given(point, point, point, point, point, point)
@settings(max_examples=200)
def test_phi2_oracle(s1, s2, s3, y1, y2, y3):
    assume(o_dist(s1, s2) + o_dist(s2, s3) + o_dist(s1, s3) > 1e-6)
    assume(o_dist(y1, y2) + o_dist(y2, y3) + o_dist(y1, y3) > 1e-6)
    expect = (o_d2(s1, s2, s3) - o_d2(y1, y2, y3)) ** 2
    assert phi2(s1, s2, s3, y1, y2, y3) == pytest.approx(expect, rel=1e-12, abs=1e-12)


# ---- angle / phi3

def test_angle_examples():
    assert angle((-1, 0), (0, 0), (1, 0)) == pytest.approx(math.pi, abs=1e-15)
    assert angle((1, 0), (0, 0), (0, 1)) == pytest.approx(math.pi / 2, abs=1e-15)
    assert angle((1, 0), (0, 0), (0.5, math.sqrt(3) / 2)) == pytest.approx(math.pi / 3, abs=1e-15)
    with pytest.raises(DegenerateGeometryError):
        angle((0, 0), (0, 0), (1, 1))


def test_phi3_examples():
    tri = [(1, 0), (0, 0), (0, 1)]
    assert phi3(*tri, (6, 5), (5, 5), (5, 6)) == 0
    eq = [(1, 0), (0, 0), (0.5, math.sqrt(3) / 2)]
    assert phi3(*tri, *eq) == pytest.approx((math.pi / 6) ** 2, abs=1e-12)
    assert (math.pi / 6) ** 2 == pytest.approx(0.27416, abs=1e-5)


@given(point, point, point, point, point, point)
@settings(max_examples=200)
def test_phi3_oracle(s1, s2, s3, y1, y2, y3):
    for a, b, c in ((s1, s2, s3), (y1, y2, y3)):
        assume(o_dist(a, b) > 1e-3 and o_dist(c, b) > 1e-3)
    expect = (o_angle(s1, s2, s3) - o_angle(y1, y2, y3)) ** 2
    # acos loses precision near 0 and pi; compare angles, not squares
    got = phi3(s1, s2, s3, y1, y2, y3)
    assert math.sqrt(got) == pytest.approx(math.sqrt(expect), abs=1e-7)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=100)
def test_similarity_invariance_phi2_phi3(seed):
    rng = np.random.default_rng(seed)
    s = rng.uniform(0, 100, size=(3, 2))
    y = rng.uniform(0, 100, size=(3, 2))
    T = similarity(rng)
    ty = T(y)
    assert abs(phi2(*s, *y) - phi2(*s, *ty)) < 1e-9
    assert abs(phi3(*s, *y) - phi3(*s, *ty)) < 1e-9


# ---- phi0 / unary

def test_phi0_and_collapse():
    np.testing.assert_array_equal(phi0([1, 2], [1, 2]), [0, 0])
    np.testing.assert_array_equal(phi0([1, 2], [0, 4]), [1, 4])
    assert collapse_unary([0, 0], [1, 2], [0, 4]) == 0
    assert collapse_unary([1, 1], [1, 2], [0, 4]) == 5
    with pytest.raises(ValueError):
        phi0([1, 2], [1, 2, 3])
    with pytest.raises(ValueError):
        collapse_unary([1, 1, 1], [1, 2], [0, 4])


def test_unary_matrices_vs_oracle():
    rng = np.random.default_rng(5)
    s = random_scene(rng, 9, k=60)
    u = random_scene(rng, 14, k=60)
    t = TemplateShape(s, (2, 4, 6, 8))
    th = rng.normal(size=60)
    F = unary_feature_matrix(t, u)
    C = unary_cost_matrix(t, u, th)
    for i in range(4):
        for j in range(14):
            f = [(a - b) ** 2 for a, b in zip(s.descriptors[t.index(i)], u.descriptors[j])]
            np.testing.assert_allclose(F[i, j], f, rtol=0, atol=1e-12)
            assert C[i, j] == pytest.approx(sum(w * v for w, v in zip(th, f)), abs=1e-12)
    with pytest.raises(MissingDescriptorsError):
        unary_feature_matrix(TemplateShape(Scene(s.points, 1, 1), (0, 1, 2)), u)


# ---- Delaunay

def brute_delaunay_edges(P):
    """Edges of all triangles whose circumcircle holds no other point."""
    n = len(P)
    edges = set()
    for a, b, c in itertools.combinations(range(n), 3):
        (ax, ay), (bx, by), (cx, cy) = P[a], P[b], P[c]
        dd = 2 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
        if abs(dd) < 1e-12:
            continue
        ux = ((ax**2 + ay**2) * (by - cy) + (bx**2 + by**2) * (cy - ay) + (cx**2 + cy**2) * (ay - by)) / dd
        uy = ((ax**2 + ay**2) * (cx - bx) + (bx**2 + by**2) * (ax - cx) + (cx**2 + cy**2) * (bx - ax)) / dd
        r2 = (ax - ux) ** 2 + (ay - uy) ** 2
        d2_ = ((P[:, 0] - ux) ** 2 + (P[:, 1] - uy) ** 2)
        d2_[[a, b, c]] = np.inf
        if np.all(d2_ > r2 * (1 + 1e-12)):
            edges |= {frozenset((a, b)), frozenset((b, c)), frozenset((a, c))}
    return edges


def test_delaunay_small():
    g = delaunay([(0, 0), (1, 0), (0, 1)])
    assert len(g.edges) == 3
    g = delaunay([(0, 0), (3, 0.2), (3.5, 2.5), (0.3, 2)])
    assert len(g.edges) == 5
    with pytest.raises(DegenerateGeometryError):
        delaunay([(0, 0), (1, 1)])
    with pytest.raises(DegenerateGeometryError):
        delaunay([(0, 0), (1, 1), (2, 2), (3, 3)])


@pytest.mark.parametrize("seed", range(5))
def test_delaunay_vs_empty_circle_oracle(seed):
    rng = np.random.default_rng(seed)
    P = rng.uniform(0, 100, size=(30, 2))
    g = delaunay(P)
    assert set(g.edges) == brute_delaunay_edges(P)
    assert len(g.edges) <= 3 * 30 - 6
    # every convex hull edge present
    from scipy.spatial import ConvexHull

    for a, b in ConvexHull(P).simplices:
        assert g.has_edge(int(a), int(b))


def test_adjacency_feature_and_graph():
    g1 = AdjacencyGraph(3, frozenset({frozenset((0, 1))}))
    g2 = AdjacencyGraph(3, frozenset({frozenset((1, 2))}))
    assert adjacency_feature(g1, g2, 0, 1, 1, 2) == 1
    assert adjacency_feature(g1, g2, 0, 1, 0, 2) == 0
    assert adjacency_feature(g1, g2, 0, 2, 0, 1) == 0
    with pytest.raises(ValueError):
        AdjacencyGraph(2, frozenset({frozenset((0, 2))}))


# ---- Shape Context

def brute_sc(P, i, cfg):
    P = np.asarray(P, float)
    n = len(P)
    mean = np.mean([o_dist(P[a], P[b]) for a in range(n) for b in range(n) if a != b])
    edges = np.logspace(np.log10(cfg.r_inner), np.log10(cfg.r_outer), cfg.radial_bins + 1)
    h = np.zeros(cfg.dim)
    for j in range(n):
        if j == i:
            continue
        r = o_dist(P[i], P[j]) / mean
        rb = 0
        while rb < cfg.radial_bins - 1 and r >= edges[rb + 1]:
            rb += 1
        th = math.atan2(P[j, 1] - P[i, 1], P[j, 0] - P[i, 0]) % (2 * math.pi)
        ab = min(int(th // (2 * math.pi / cfg.angular_bins)), cfg.angular_bins - 1)
        h[rb * cfg.angular_bins + ab] += 1
    return h / h.sum()


def test_shape_context_examples():
    s = Scene([[0, 0], [5, 0]], 10, 10)
    h = shape_context(s, 0)
    assert h.shape == (60,) and np.count_nonzero(h) == 1 and h.max() == 1
    with pytest.raises(ValueError):
        shape_context(Scene([[0, 0]], 1, 1), 0)


def test_shape_context_vs_brute():
    rng = np.random.default_rng(7)
    cfg = ShapeContextConfig()
    for _ in range(5):
        P = rng.uniform(0, 300, size=(25, 2))
        H = shape_contexts(P, cfg)
        for i in range(25):
            np.testing.assert_allclose(H[i], brute_sc(P, i, cfg), atol=1e-12)


@given(st.integers(0, 2**32 - 1), st.integers(2, 40))
@settings(max_examples=60, deadline=None)
def test_shape_context_is_distribution(seed, n):
    rng = np.random.default_rng(seed)
    H = shape_contexts(rng.uniform(0, 100, size=(n, 2)))
    assert np.all(H >= 0)
    np.testing.assert_allclose(H.sum(axis=1), 1.0, atol=1e-9)


@pytest.mark.parametrize("steps", [1, 3, 7])
def test_shape_context_rotation_permutes_angular_bins(steps):
    """Rotation about point i by whole bins shifts angular bins cyclically."""
    rng = np.random.default_rng(steps)
    cfg = ShapeContextConfig()
    P = rng.uniform(0, 100, size=(20, 2))
    i = 4
    th = steps * 2 * np.pi / cfg.angular_bins
    R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    Q = (P - P[i]) @ R.T + P[i]
    h = shape_contexts(P, cfg)[i].reshape(cfg.radial_bins, cfg.angular_bins)
    g = shape_contexts(Q, cfg)[i].reshape(cfg.radial_bins, cfg.angular_bins)
    # generic points sit away from bin boundaries, so the shift is exact
    np.testing.assert_allclose(np.roll(h, steps, axis=1), g, atol=1e-12)
    np.testing.assert_allclose(np.sort(h.ravel()), np.sort(g.ravel()), atol=1e-12)


def test_with_shape_context_subset():
    rng = np.random.default_rng(0)
    s = random_scene(rng, 10)
    full = with_shape_context(s)
    assert full.k == 60
    sub = with_shape_context(s, subset=[0, 1, 2, 3])
    # subset points see 3 others; non-subset points see all 4
    counts = np.round(1 / sub.descriptors[sub.descriptors > 0].min())
    assert counts in (3, 4)


# ---- clique features

def make_ctx(rng, n=6, m=9, cfg=FeatureConfig(), k=4):
    s = random_scene(rng, n + 2, k=k)
    t = TemplateShape(s, tuple(range(1, n + 1)))
    u = random_scene(rng, m, k=k)
    th0 = rng.random(k)
    return MatchContext.build(t, u, cfg, th0 if cfg.unary else None), th0


def test_clique_feature_congruent_copy_is_zero():
    rng = np.random.default_rng(0)
    s = random_scene(rng, 5, k=3)
    t = TemplateShape(s, (0, 1, 2, 3, 4))
    T = similarity(rng, scale=1.0)
    u = Scene(T(s.points), s.width, s.height, s.descriptors)
    cfg = FeatureConfig(adjacency=False)
    ctx = MatchContext.build(t, u, cfg, np.ones(3))
    for i in range(5):
        f = clique_feature(ctx, i, i, (i + 1) % 5, (i + 2) % 5, cfg)
        np.testing.assert_allclose(f, 0, atol=1e-12)


def test_clique_feature_distance_only():
    rng = np.random.default_rng(1)
    cfg = FeatureConfig(unary=False, distance=True, adjacency=False, scaled_distance=False, angle=False)
    ctx, _ = make_ctx(rng, cfg=cfg)
    t, u = ctx.template, ctx.target
    P = t.scene.points
    f = clique_feature(ctx, 2, 4, 0, 7, cfg)
    expect = phi1(P[t.index(2)], P[t.index(3)], u.points[4], u.points[0], t.scene.width, u.width) + phi1(
        P[t.index(2)], P[t.index(4)], u.points[4], u.points[7], t.scene.width, u.width
    )
    assert f.shape == (1,) and f[0] == pytest.approx(expect, abs=1e-15)


def test_clique_feature_full_vs_oracle():
    rng = np.random.default_rng(2)
    cfg = FeatureConfig()
    ctx, th0 = make_ctx(rng, cfg=cfg)
    t, u = ctx.template, ctx.target
    P, U = t.scene.points, u.points
    scale = rng.uniform(0.5, 2, size=5)
    for i, (a, b, c) in [(0, (1, 2, 3)), (5, (8, 0, 4)), (3, (2, 2, 6))]:
        s0, s1, s2 = (P[t.index(i + k)] for k in range(3))
        unary = sum(w * (x - y) ** 2 for w, x, y in zip(th0, t.scene.descriptors[t.index(i)], u.descriptors[a]))
        dist = (o_dist(s0, s1) / t.scene.width - o_dist(U[a], U[b]) / u.width) ** 2 + (
            o_dist(s0, s2) / t.scene.width - o_dist(U[a], U[c]) / u.width
        ) ** 2
        adj = adjacency_feature(ctx.template_graph, ctx.target_graph, t.index(i), t.index(i + 1), a, b) + \
            adjacency_feature(ctx.template_graph, ctx.target_graph, t.index(i), t.index(i + 2), a, c)
        sd = (o_d2(s0, s1, s2) - o_d2(U[a], U[b], U[c])) ** 2 + (o_d2(s0, s2, s1) - o_d2(U[a], U[c], U[b])) ** 2
        if b in (a, c):
            ang = cfg.degenerate_penalty
        else:
            ang = (o_angle(s0, s1, s2) - o_angle(U[a], U[b], U[c])) ** 2
        expect = np.array([unary, dist, adj, sd, ang]) * scale
        got = clique_feature(ctx, i, a, b, c, cfg, scale)
        np.testing.assert_allclose(got, expect, rtol=1e-9, atol=1e-12)


def test_clique_tensor_matches_scalar():
    rng = np.random.default_rng(3)
    cfg = FeatureConfig()
    ctx, _ = make_ctx(rng, n=5, m=7, cfg=cfg)
    scale = rng.uniform(0.5, 2, size=5)
    ca, cb, cc = [0, 3, 3, 5], [1, 3, 6], [3, 0]  # includes coincident picks
    T = clique_tensor(ctx, 1, ca, cb, cc, cfg, scale)
    assert T.shape == (5, 4, 3, 2)
    for x, a in enumerate(ca):
        for y, b in enumerate(cb):
            for z, c in enumerate(cc):
                np.testing.assert_allclose(T[:, x, y, z], clique_feature(ctx, 1, a, b, c, cfg, scale),
                                           rtol=1e-12, atol=1e-12)


def test_degenerate_triples_get_penalty():
    rng = np.random.default_rng(4)
    cfg = FeatureConfig(unary=False, adjacency=False, degenerate_penalty=7.5)
    ctx, _ = make_ctx(rng, cfg=cfg)
    f = clique_feature(ctx, 0, 2, 2, 2, cfg)
    assert f[1] == 7.5 and f[2] == 7.5
    assert np.all(np.isfinite(f))


@pytest.mark.parametrize("n", range(4, 13))
def test_loop_edge_count(n):
    # directed pairs: at n=4, (0, 2) and (2, 0) are both legitimately present
    counts = {}
    for pair in loop_pairs(n):
        counts[pair] = counts.get(pair, 0) + 1
    expected = {(i, (i + 1) % n) for i in range(n)} | {(i, (i + 2) % n) for i in range(n)}
    assert set(counts) == expected
    assert all(v == 1 for v in counts.values())
    assert len(loop_pairs(n)) == 2 * n
