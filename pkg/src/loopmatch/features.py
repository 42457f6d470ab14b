"""Geometric and appearance features for the loop-of-cliques model.

Scalar functions (``d1``, ``phi1`` ... ``clique_feature``) evaluate one
configuration at a time and are what the tests treat as ground truth.
``clique_tensor`` evaluates the same groups for every candidate triple of a
clique at once and is what table construction uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import Delaunay, QhullError

from .core import (
    DegenerateGeometryError,
    FeatureConfig,
    MissingDescriptorsError,
    Scene,
    TemplateShape,
)


def _xy(p):
    return float(p[0]), float(p[1])


def d1(a, b, scene_width):
    """Euclidean distance between ``a`` and ``b`` divided by the scene width."""
    if not scene_width > 0:
        raise ValueError("scene width must be positive")
    ax, ay = _xy(a)
    bx, by = _xy(b)
    return math.hypot(ax - bx, ay - by) / scene_width


def phi1(s1, s2, y1, y2, template_width, target_width):
    return (d1(s1, s2, template_width) - d1(y1, y2, target_width)) ** 2


def d2(a, b, c):
    """Distance a-b relative to the mean side length of triangle abc."""
    ab = math.dist(_xy(a), _xy(b))
    bc = math.dist(_xy(b), _xy(c))
    ac = math.dist(_xy(a), _xy(c))
    mean = (ab + bc + ac) / 3.0
    if mean == 0.0:
        raise DegenerateGeometryError("all three points coincide")
    return ab / mean


def phi2(s1, s2, s3, y1, y2, y3):
    return (d2(s1, s2, s3) - d2(y1, y2, y3)) ** 2


def angle(a, b, c):
    """Angle at ``b`` between rays b->a and b->c, in [0, pi]."""
    ax, ay = _xy(a)
    bx, by = _xy(b)
    cx, cy = _xy(c)
    ux, uy = ax - bx, ay - by
    vx, vy = cx - bx, cy - by
    if (ux == 0.0 and uy == 0.0) or (vx == 0.0 and vy == 0.0):
        raise DegenerateGeometryError("zero-length vector in angle")
    return math.atan2(abs(ux * vy - uy * vx), ux * vx + uy * vy)


def phi3(s1, s2, s3, y1, y2, y3):
    return (angle(s1, s2, s3) - angle(y1, y2, y3)) ** 2


def phi0(phi_s, phi_u):
    """Elementwise squared descriptor difference."""
    a = np.asarray(phi_s, dtype=float)
    b = np.asarray(phi_u, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"descriptor dimension mismatch: {a.shape} vs {b.shape}")
    return (a - b) ** 2


def collapse_unary(theta0, phi_s, phi_u):
    theta0 = np.asarray(theta0, dtype=float)
    f = phi0(phi_s, phi_u)
    if theta0.shape != f.shape:
        raise ValueError(f"theta0 has dimension {theta0.shape[0]}, descriptors {f.shape[0]}")
    return float(theta0 @ f)


def unary_feature_matrix(template: TemplateShape, target: Scene):
    """Phi0 for every (template point, target point): shape (n, m, k)."""
    try:
        ds = template.descriptors
    except MissingDescriptorsError:
        raise MissingDescriptorsError("template scene has no descriptors") from None
    du = target.require_descriptors()
    if ds.shape[1] != du.shape[1]:
        raise ValueError(f"descriptor dimension mismatch: {ds.shape[1]} vs {du.shape[1]}")
    return (ds[:, None, :] - du[None, :, :]) ** 2


def unary_cost_matrix(template: TemplateShape, target: Scene, theta0):
    """<theta0, Phi0(s_i, u)> for every pair: shape (n, m)."""
    theta0 = np.asarray(theta0, dtype=float)
    ds = template.descriptors
    du = target.require_descriptors()
    if theta0.shape[0] != ds.shape[1] or ds.shape[1] != du.shape[1]:
        raise ValueError(
            f"dimension mismatch: theta0 {theta0.shape[0]}, "
            f"template k {ds.shape[1]}, target k {du.shape[1]}"
        )
    # expand (a-b)^2 to avoid the (n, m, k) intermediate
    w = theta0
    return (
        (ds**2 @ w)[:, None]
        - 2.0 * (ds * w) @ du.T
        + (du**2 @ w)[None, :]
    )


# --------------------------------------------------------------------------
# adjacency


@dataclass(frozen=True)
class AdjacencyGraph:
    n: int
    edges: frozenset

    def __post_init__(self):
        for e in self.edges:
            i, j = tuple(e)
            if i == j or not (0 <= i < self.n and 0 <= j < self.n):
                raise ValueError(f"bad edge {e}")

    def has_edge(self, i, j):
        return frozenset((i, j)) in self.edges

    def matrix(self):
        m = np.zeros((self.n, self.n))
        for e in self.edges:
            i, j = tuple(e)
            m[i, j] = m[j, i] = 1.0
        return m


def delaunay(points) -> AdjacencyGraph:
    """Edge set of the Delaunay triangulation (Qhull, triangulated output)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if pts.shape[0] < 3:
        raise DegenerateGeometryError("Delaunay triangulation needs at least 3 points")
    try:
        tri = Delaunay(pts)
    except QhullError as e:
        raise DegenerateGeometryError(f"points are collinear or degenerate: {e}") from None
    edges = set()
    for a, b, c in tri.simplices:
        edges.update(
            (frozenset((int(a), int(b))), frozenset((int(b), int(c))), frozenset((int(a), int(c))))
        )
    return AdjacencyGraph(pts.shape[0], frozenset(edges))


def adjacency_feature(g_template, g_target, p1, p2, q1, q2):
    return 1.0 if g_template.has_edge(p1, p2) and g_target.has_edge(q1, q2) else 0.0


# --------------------------------------------------------------------------
# shape context


@dataclass(frozen=True)
class ShapeContextConfig:
    radial_bins: int = 5
    angular_bins: int = 12
    r_inner: float = 0.125
    r_outer: float = 2.0

    def __post_init__(self):
        if self.radial_bins < 1 or self.angular_bins < 1:
            raise ValueError("bin counts must be positive")
        if not 0 < self.r_inner < self.r_outer:
            raise ValueError("need 0 < r_inner < r_outer")

    @property
    def dim(self):
        return self.radial_bins * self.angular_bins

    def radial_edges(self):
        return np.logspace(
            math.log10(self.r_inner), math.log10(self.r_outer), self.radial_bins + 1
        )


def mean_pairwise_distance(points):
    pts = np.asarray(points, dtype=float)
    n = pts.shape[0]
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.hypot(diff[..., 0], diff[..., 1])
    return dist[np.triu_indices(n, 1)].mean()


def shape_contexts(points, cfg: ShapeContextConfig = ShapeContextConfig(), reference=None):
    """Log-polar histograms for ``points`` over the ``reference`` point set.

    Row ``i`` histograms every reference point other than ``points[i]`` itself
    (by index when ``reference`` is None). Bin index is
    ``radial * angular_bins + angular``; angular bin 0 starts at +x.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    self_ref = reference is None
    ref = pts if self_ref else np.asarray(reference, dtype=float).reshape(-1, 2)
    if ref.shape[0] < 2:
        raise ValueError("shape context needs at least 2 points")
    scale = mean_pairwise_distance(ref)
    if scale == 0.0:
        raise DegenerateGeometryError("all points coincide")
    diff = ref[None, :, :] - pts[:, None, :]
    r = np.hypot(diff[..., 0], diff[..., 1]) / scale
    theta = np.mod(np.arctan2(diff[..., 1], diff[..., 0]), 2 * np.pi)

    inner = cfg.radial_edges()[1:-1]
    rbin = np.searchsorted(inner, r, side="right")
    abin = np.floor(theta / (2 * np.pi / cfg.angular_bins)).astype(int)
    abin = np.minimum(abin, cfg.angular_bins - 1)
    flat = rbin * cfg.angular_bins + abin

    mask = np.ones(r.shape, dtype=bool)
    if self_ref:
        np.fill_diagonal(mask, False)
    else:
        # drop reference points that coincide with the query point itself
        mask &= r > 0
    out = np.zeros((pts.shape[0], cfg.dim))
    for i in range(pts.shape[0]):
        out[i] = np.bincount(flat[i][mask[i]], minlength=cfg.dim)
    totals = out.sum(axis=1, keepdims=True)
    return np.divide(out, totals, out=np.zeros_like(out), where=totals > 0)


def shape_context(scene: Scene, i, cfg: ShapeContextConfig = ShapeContextConfig()):
    if len(scene) < 2:
        raise ValueError("shape context needs at least 2 points")
    return shape_contexts(scene.points, cfg)[i]


def with_shape_context(scene: Scene, cfg=ShapeContextConfig(), subset=None) -> Scene:
    """Copy of ``scene`` whose descriptors are Shape Context histograms.

    With ``subset`` given, histograms count only the subset's points.
    """
    if subset is None:
        desc = shape_contexts(scene.points, cfg)
    else:
        desc = shape_contexts(scene.points, cfg, reference=scene.points[list(subset)])
    return scene.with_descriptors(desc)


# --------------------------------------------------------------------------
# cliques


@dataclass(frozen=True, eq=False)
class MatchContext:
    """Per-pair data shared by every clique of one template/target pair."""

    template: TemplateShape
    target: Scene
    template_graph: AdjacencyGraph | None = None
    target_graph: AdjacencyGraph | None = None
    unary: np.ndarray | None = None  # (n, m) collapsed unary costs

    @classmethod
    def build(cls, template, target, cfg: FeatureConfig, theta0=None):
        tg = ug = None
        if cfg.adjacency:
            tg = delaunay(template.scene.points)
            ug = delaunay(target.points)
        unary = None
        if cfg.unary:
            if theta0 is None:
                raise ValueError("unary group is active but theta0 was not given")
            unary = unary_cost_matrix(template, target, theta0)
        return cls(template, target, tg, ug, unary)


def clique_feature(ctx: MatchContext, i, ya, yb, yc, cfg: FeatureConfig, scale_factors=None):
    """Feature vector for clique ``i`` with template positions (i, i+1, i+2)
    assigned to target points (ya, yb, yc)."""
    t = ctx.template
    n = len(t)
    s = [t.scene.points[t.index(i + k)] for k in range(3)]
    si = [t.index(i + k) for k in range(3)]
    u = ctx.target.points
    y = [u[ya], u[yb], u[yc]]
    tw, uw = t.scene.width, ctx.target.width
    pen = cfg.degenerate_penalty
    out = []
    if cfg.unary:
        out.append(float(ctx.unary[i % n, ya]))
    if cfg.distance:
        out.append(phi1(s[0], s[1], y[0], y[1], tw, uw) + phi1(s[0], s[2], y[0], y[2], tw, uw))
    if cfg.adjacency:
        gt, gu = ctx.template_graph, ctx.target_graph
        out.append(
            adjacency_feature(gt, gu, si[0], si[1], ya, yb)
            + adjacency_feature(gt, gu, si[0], si[2], ya, yc)
        )
    if cfg.scaled_distance:
        try:
            v = phi2(s[0], s[1], s[2], y[0], y[1], y[2]) + phi2(s[0], s[2], s[1], y[0], y[2], y[1])
        except DegenerateGeometryError:
            v = pen
        out.append(v)
    if cfg.angle:
        try:
            v = phi3(s[0], s[1], s[2], y[0], y[1], y[2])
        except DegenerateGeometryError:
            v = pen
        out.append(v)
    out = np.array(out)
    if scale_factors is not None:
        out = out * np.asarray(scale_factors, dtype=float)
    return out


def _triangle_terms(a, b, c):
    """d2(a,b,c), d2(a,c,b) and angle at b for broadcastable point arrays."""
    ab = np.hypot(*np.moveaxis(a - b, -1, 0))
    bc = np.hypot(*np.moveaxis(b - c, -1, 0))
    ac = np.hypot(*np.moveaxis(a - c, -1, 0))
    mean = (ab + bc + ac) / 3.0
    bad_tri = mean == 0.0
    safe = np.where(bad_tri, 1.0, mean)
    d_ab = ab / safe
    d_ac = ac / safe
    u = a - b
    v = c - b
    cross = u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]
    dot = u[..., 0] * v[..., 0] + u[..., 1] * v[..., 1]
    bad_ang = (ab == 0.0) | (bc == 0.0)
    ang = np.arctan2(np.abs(cross), dot)
    return d_ab, d_ac, ang, bad_tri, bad_ang


def clique_tensor(ctx: MatchContext, i, ca, cb, cc, cfg: FeatureConfig, scale_factors=None):
    """Features of clique ``i`` for all candidate triples.

    Returns an array of shape (groups, len(ca), len(cb), len(cc)).
    """
    t = ctx.template
    n = len(t)
    ca, cb, cc = (np.asarray(c, dtype=np.intp) for c in (ca, cb, cc))
    shape = (len(ca), len(cb), len(cc))
    sp = t.scene.points
    s0, s1, s2 = sp[t.index(i)], sp[t.index(i + 1)], sp[t.index(i + 2)]
    u = ctx.target.points
    A = u[ca][:, None, None, :]
    B = u[cb][None, :, None, :]
    C = u[cc][None, None, :, :]
    tw, uw = t.scene.width, ctx.target.width
    groups = []
    if cfg.unary:
        groups.append(np.broadcast_to(ctx.unary[i % n, ca][:, None, None], shape))
    if cfg.distance:
        dab = np.linalg.norm(u[ca][:, None, :] - u[cb][None, :, :], axis=-1) / uw
        dac = np.linalg.norm(u[ca][:, None, :] - u[cc][None, :, :], axis=-1) / uw
        ts01 = math.dist(s0, s1) / tw
        ts02 = math.dist(s0, s2) / tw
        groups.append((ts01 - dab)[:, :, None] ** 2 + (ts02 - dac)[:, None, :] ** 2)
    if cfg.adjacency:
        gt, gu = ctx.template_graph, ctx.target_graph
        e01 = float(gt.has_edge(t.index(i), t.index(i + 1)))
        e02 = float(gt.has_edge(t.index(i), t.index(i + 2)))
        m = gu.matrix()
        groups.append(e01 * m[np.ix_(ca, cb)][:, :, None] + e02 * m[np.ix_(ca, cc)][:, None, :])
    if cfg.scaled_distance or cfg.angle:
        sd_ab, sd_ac, s_ang, s_bad_tri, s_bad_ang = _triangle_terms(s0, s1, s2)
        d_ab, d_ac, ang, bad_tri, bad_ang = _triangle_terms(A, B, C)
        if cfg.scaled_distance:
            g = (sd_ab - d_ab) ** 2 + (sd_ac - d_ac) ** 2
            groups.append(np.where(bad_tri | s_bad_tri, cfg.degenerate_penalty, g))
        if cfg.angle:
            g = (s_ang - ang) ** 2
            groups.append(np.where(bad_ang | s_bad_ang, cfg.degenerate_penalty, g))
    out = np.stack([np.broadcast_to(g, shape) for g in groups]) if groups else np.zeros((0,) + shape)
    if scale_factors is not None:
        out = out * np.asarray(scale_factors, dtype=float)[:, None, None, None]
    return out


def loop_pairs(n: int) -> Sequence[tuple]:
    """Template pairs touched by the distance group over the whole loop."""
    pairs = []
    for i in range(n):
        pairs.append((i, (i + 1) % n))
        pairs.append((i, (i + 2) % n))
    return pairs
