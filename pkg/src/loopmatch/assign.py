"""Rectangular linear assignment for the unary (stage-1) model."""

from __future__ import annotations

import numba
import numpy as np

from .core import Assignment, Scene, TemplateShape
from .features import unary_cost_matrix
from .losses import node_loss_matrix


@numba.njit(cache=True, nogil=True)
def _hungarian_kernel(cost):
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    row_of = np.zeros(m + 1, dtype=np.intp)  # 1-based row matched to column j, 0 = free
    way = np.zeros(m + 1, dtype=np.intp)
    minv = np.empty(m + 1)
    used = np.empty(m + 1, dtype=np.bool_)
    for i in range(1, n + 1):
        row_of[0] = i
        j0 = 0
        minv[:] = np.inf
        used[:] = False
        while True:
            used[j0] = True
            i0 = row_of[j0]
            delta = np.inf
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[row_of[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if row_of[j0] == 0:
                break
        while True:
            j1 = way[j0]
            row_of[j0] = row_of[j1]
            j0 = j1
            if j0 == 0:
                break
    col = np.empty(n, dtype=np.intp)
    for j in range(1, m + 1):
        if row_of[j]:
            col[row_of[j] - 1] = j - 1
    return col, u[1:], v[1:]


def _hungarian_min(cost):
    """Shortest augmenting path Hungarian method, rows <= cols.

    Returns (col_of_row, u, v) with u, v optimal duals of
    ``min sum c[i, col[i]]`` s.t. each row used once, each column at most once.
    """
    return _hungarian_kernel(np.ascontiguousarray(cost, dtype=np.float64))


def assignment_score(scores, cols):
    """Row-ordered sum of ``scores[i, cols[i]]``."""
    total = 0.0
    for i, j in enumerate(cols):
        total += scores[i, j]
    return total


def solve_lap(scores, tol=1e-10) -> Assignment:
    """Injective assignment of rows to columns maximising the total score.

    Ties between optimal assignments go to the lexicographically smallest
    column vector. Rows must not outnumber columns.
    """
    scores = np.asarray(scores, dtype=float)
    if scores.ndim != 2:
        raise ValueError("score matrix must be 2D")
    n, m = scores.shape
    if n > m:
        raise ValueError(f"more rows ({n}) than columns ({m})")
    if n == 0:
        return Assignment(())
    if not np.all(np.isfinite(scores)):
        raise ValueError("score matrix must be finite")
    cost = -scores
    col, u, v = _hungarian_min(cost)
    best = assignment_score(scores, col)
    scale = max(1.0, float(np.abs(scores).max()))
    eps = tol * scale * n
    slack = cost - u[:, None] - v[None, :]
    tight = slack <= eps
    col = _lexicographic(scores, col, tight, best, eps)
    return Assignment(tuple(int(j) for j in col))


def _lexicographic(scores, col, tight, best, eps):
    n, m = scores.shape
    col = col.copy()
    for i in range(n):
        fixed = set(int(c) for c in col[:i])
        for j in range(col[i]):
            if j in fixed or not tight[i, j]:
                continue
            trial = _complete(scores, col[:i], i, j)
            if trial is not None and assignment_score(scores, trial) >= best - eps:
                col = trial
                break
    return col


def _complete(scores, prefix, i, j):
    """Best completion with rows < i fixed to ``prefix`` and row i on column j."""
    n, m = scores.shape
    taken = set(int(c) for c in prefix) | {j}
    free_cols = np.array([c for c in range(m) if c not in taken], dtype=np.intp)
    rest = n - i - 1
    out = np.empty(n, dtype=np.intp)
    out[:i] = prefix
    out[i] = j
    if rest == 0:
        return out
    if rest > free_cols.size:
        return None
    sub, _, _ = _hungarian_min(-scores[i + 1 :][:, free_cols])
    out[i + 1 :] = free_cols[sub]
    return out


def unary_scores(template: TemplateShape, target: Scene, theta0, loss_augment=None):
    """Score matrix ``-<theta0, Phi0(s_i, u)>``, optionally plus node losses.

    ``loss_augment`` is ``(ground_truth, kind)`` with kind 'hamming' or 'endpoint'.
    """
    s = -unary_cost_matrix(template, target, theta0)
    if loss_augment is not None:
        y_gt, kind = loss_augment
        s = s + node_loss_matrix(kind, y_gt, target)
    return s
