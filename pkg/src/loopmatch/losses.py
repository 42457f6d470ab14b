"""Per-node decomposable matching losses."""

import numpy as np

from .core import Assignment, Scene

LOSSES = ("hamming", "endpoint")


def _check(y, y_gt):
    if len(y) != len(y_gt):
        raise ValueError(f"length mismatch: {len(y)} vs {len(y_gt)}")
    if len(y) == 0:
        raise ValueError("empty assignment")


def hamming(y, y_gt):
    """Fraction of template points assigned to the wrong target."""
    _check(y, y_gt)
    y, y_gt = np.asarray(list(y)), np.asarray(list(y_gt))
    return float(np.count_nonzero(y != y_gt)) / len(y)


def endpoint(y, y_gt, target: Scene):
    """Mean distance to the true target point, as a fraction of image width."""
    _check(y, y_gt)
    pts = target.points
    d = np.linalg.norm(pts[list(y)] - pts[list(y_gt)], axis=1)
    return float(d.sum() / len(d) / target.width)


def loss(kind, y, y_gt, target: Scene):
    if kind == "hamming":
        return hamming(y, y_gt)
    if kind == "endpoint":
        return endpoint(y, y_gt, target)
    raise ValueError(f"unknown loss {kind!r}; expected one of {LOSSES}")


def node_loss_matrix(kind, y_gt: Assignment, target: Scene, candidates=None):
    """Loss contribution of assigning node ``i`` to each target point.

    Summing row ``i`` at ``y[i]`` over all rows reproduces ``loss(kind, y, y_gt)``.
    With ``candidates`` (list of index arrays) returns one row per node over
    that node's candidates instead of a dense ``(n, m)`` matrix.
    """
    n = len(y_gt)
    gt = y_gt.as_array()
    if kind == "hamming":
        if candidates is None:
            out = np.full((n, len(target)), 1.0 / n)
            out[np.arange(n), gt] = 0.0
            return out
        return [np.where(np.asarray(c) == gt[i], 0.0, 1.0 / n) for i, c in enumerate(candidates)]
    if kind == "endpoint":
        pts = target.points
        if candidates is None:
            d = np.linalg.norm(pts[None, :, :] - pts[gt][:, None, :], axis=-1)
            return d / (n * target.width)
        return [
            np.linalg.norm(pts[np.asarray(c)] - pts[gt[i]], axis=1) / (n * target.width)
            for i, c in enumerate(candidates)
        ]
    raise ValueError(f"unknown loss {kind!r}; expected one of {LOSSES}")
