"""Exact MAP inference on the loop of third-order cliques.

Clique ``i`` covers template positions (i, i+1, i+2) mod n, so neighbouring
cliques share two nodes and the clique graph is a single cycle. Tables hold
log-potentials (scores to maximise) indexed by *candidate position*, not by
target point; ``CliqueTableSet.candidates`` maps back to target indices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .core import Assignment, FeatureConfig, Scene, TemplateShape, WeightModel
from .features import MatchContext, clique_tensor, unary_cost_matrix
from .losses import node_loss_matrix

BRUTEFORCE_LIMIT = 10**7


@dataclass(frozen=True, eq=False)
class CliqueTableSet:
    tables: tuple
    candidates: tuple | None = None

    def __post_init__(self):
        tables = tuple(np.asarray(t, dtype=float) for t in self.tables)
        n = len(tables)
        if n < 3:
            raise ValueError("need at least 3 cliques")
        sizes = [t.shape[0] for t in tables]
        for i, t in enumerate(tables):
            want = (sizes[i], sizes[(i + 1) % n], sizes[(i + 2) % n])
            if t.shape != want:
                raise ValueError(f"table {i} has shape {t.shape}, expected {want}")
            if not np.all(np.isfinite(t)):
                raise ValueError(f"table {i} has non-finite entries")
        object.__setattr__(self, "tables", tables)
        if self.candidates is not None:
            cands = tuple(np.asarray(c, dtype=np.intp) for c in self.candidates)
            if [len(c) for c in cands] != sizes:
                raise ValueError("candidate lists do not match table sizes")
            object.__setattr__(self, "candidates", cands)

    @property
    def n(self):
        return len(self.tables)

    @property
    def sizes(self):
        return tuple(t.shape[0] for t in self.tables)

    def evaluate(self, local):
        """Total score of a candidate-position assignment."""
        n = self.n
        total = 0.0
        for i, t in enumerate(self.tables):
            total += t[local[i], local[(i + 1) % n], local[(i + 2) % n]]
        return float(total)

    def to_targets(self, local):
        if self.candidates is None:
            return Assignment(tuple(int(a) for a in local))
        return Assignment(tuple(int(self.candidates[i][a]) for i, a in enumerate(local)))

    def shifted(self, kappa):
        return CliqueTableSet(tuple(t + kappa for t in self.tables), self.candidates)


@dataclass(frozen=True)
class InferenceResult:
    """``iterations`` counts sweeps until the messages stopped changing
    (the confirming sweep is not counted)."""

    assignment: Assignment
    local: tuple
    objective: float
    iterations: int
    converged: bool
    method: str = ""
    upper_bound: float = math.nan


def _result(tables, local, iterations, converged, method, upper_bound=math.nan):
    local = tuple(int(a) for a in local)
    return InferenceResult(
        tables.to_targets(local),
        local,
        tables.evaluate(local),
        iterations,
        converged,
        method,
        upper_bound,
    )


# --------------------------------------------------------------------------
# message passing


# tables are checked finite on construction, so fastmath is safe here
@numba.njit(cache=True, nogil=True, fastmath=True)
def _sweep(flat, toff, sizes, msg, moff, norms, tmp):
    """One clockwise pass; returns the max absolute message change.

    Message i (clique i -> i+1) lives at msg[moff[i]:] with shape
    (sizes[i+1], sizes[i+2]); clique i reads message i-1 over (y_i, y_i+1).
    """
    n = sizes.shape[0]
    change = 0.0
    for i in range(n):
        i1 = i + 1 if i + 1 < n else i + 1 - n
        i2 = i + 2 if i + 2 < n else i + 2 - n
        ka = sizes[i]
        kb = sizes[i1]
        kc = sizes[i2]
        inc = moff[i - 1 if i > 0 else n - 1]
        out = moff[i]
        t0 = toff[i]
        for b in range(kb):
            m_ab = msg[inc + b]
            row = t0 + b * kc
            base = b * kc
            for c in range(kc):
                tmp[base + c] = flat[row + c] + m_ab
        for a in range(1, ka):
            for b in range(kb):
                m_ab = msg[inc + a * kb + b]
                row = t0 + (a * kb + b) * kc
                base = b * kc
                for c in range(kc):
                    tmp[base + c] = max(tmp[base + c], flat[row + c] + m_ab)
        mx = tmp[0]
        for q in range(1, kb * kc):
            mx = max(mx, tmp[q])
        for q in range(kb * kc):
            nv = tmp[q] - mx
            d = abs(nv - msg[out + q])
            if d > change:
                change = d
            msg[out + q] = nv
        norms[i] = mx
    return change


class LoopMessages:
    """Packed tables and messages for repeated sweeps over one table set."""

    def __init__(self, tables: CliqueTableSet):
        self.tables = tables
        n = tables.n
        sizes = np.array(tables.sizes, dtype=np.int64)
        self.sizes = sizes
        self.flat = np.concatenate([t.ravel() for t in tables.tables])
        self.toff = np.zeros(n, dtype=np.int64)
        self.toff[1:] = np.cumsum([t.size for t in tables.tables])[:-1]
        msz = np.array([sizes[(i + 1) % n] * sizes[(i + 2) % n] for i in range(n)])
        self.moff = np.zeros(n, dtype=np.int64)
        self.moff[1:] = np.cumsum(msz)[:-1]
        self.msg = np.zeros(int(msz.sum()))
        self.norms = np.zeros(n)
        self.tmp = np.empty(int(msz.max()))
        self.last_change = math.inf
        self._prev_last = None

    def message(self, i):
        n = self.tables.n
        kb, kc = self.sizes[(i + 1) % n], self.sizes[(i + 2) % n]
        o = self.moff[i]
        return self.msg[o : o + kb * kc].reshape(kb, kc)

    def sweep(self):
        self._prev_last = self.message(self.tables.n - 1).copy()
        self.last_change = _sweep(
            self.flat, self.toff, self.sizes, self.msg, self.moff, self.norms, self.tmp
        )
        return self.last_change

    def upper_bound(self):
        """Bound on every assignment's score, valid after any sweep.

        Telescoping T_i <= m_i + norm_i - m_{i-1} around the loop leaves only
        the change in the last message, which closes the loop.
        """
        drift = np.max(np.abs(self.message(self.tables.n - 1) - self._prev_last))
        return float(math.fsum(self.norms) + drift)

    def backtrack(self, start):
        """Follow argmax pointers once around the loop from separator state
        ``start`` = (y_0, y_1); returns the local assignment and the
        separator state it implies for (y_0, y_1)."""
        tabs = self.tables.tables
        n = self.tables.n
        y = [0] * n
        y[0], y[1] = start
        # clique n-1 covers (y_{n-1}, y_0, y_1)
        b, c = start
        for i in range(n - 1, 1, -1):
            inc = self.message(i - 1)
            scores = tabs[i][:, b, c] + inc[:, b]
            a = int(np.argmax(scores))
            y[i] = a
            b, c = a, b
        # clique 1 and 0 re-derive y_1 and y_0
        y1 = int(np.argmax(tabs[1][:, y[2], y[3 % n]] + self.message(0)[:, y[2]]))
        y0 = int(np.argmax(tabs[0][:, y1, y[2]] + self.message(n - 1)[:, y1]))
        return y, (y0, y1)


def _decode(lm: LoopMessages):
    m_last = lm.message(lm.tables.n - 1)
    state = tuple(int(v) for v in np.unravel_index(int(np.argmax(m_last)), m_last.shape))
    seen = {}
    for step in range(m_last.size + 1):
        if state in seen:
            break
        seen[state] = step
        y, nxt = lm.backtrack(state)
        if nxt == state:
            return y
        state = nxt
    return None


def map_loopy(tables: CliqueTableSet, max_iters=20, tol=1e-9, certify_tol=1e-9, fallback=True):
    """Max-sum message passing around the clique loop.

    The decoded assignment is checked against the message upper bound; if it
    does not attain the bound (ties, or messages not yet at a fixed point)
    the exact conditioned solver supplies the answer, so the result is
    always a MAP assignment. ``fallback=False`` skips that step and returns
    the raw decode, for studying truncated message passing.
    """
    if tables.n < 4:
        r = map_bruteforce(tables)
        return InferenceResult(r.assignment, r.local, r.objective, 0, True, "bruteforce")
    lm = LoopMessages(tables)
    converged = False
    sweeps = 0
    for sweeps in range(1, max_iters + 1):
        if lm.sweep() < tol:
            converged = True
            break
    iterations = max(1, sweeps - 1) if converged else sweeps
    ub = lm.upper_bound()
    y = _decode(lm)
    if y is None and not fallback:
        m_last = lm.message(tables.n - 1)
        start = np.unravel_index(int(np.argmax(m_last)), m_last.shape)
        y, _ = lm.backtrack(tuple(int(v) for v in start))
        return _result(tables, y, iterations, converged, "loopy-uncertified", ub)
    if y is not None and not fallback:
        return _result(tables, y, iterations, converged, "loopy", ub)
    if y is not None:
        obj = tables.evaluate(y)
        if obj >= ub - certify_tol * max(1.0, abs(ub)):
            return _result(tables, y, iterations, converged, "loopy", ub)
    r = map_conditioned(tables)
    return InferenceResult(
        r.assignment, r.local, r.objective, iterations, converged, "loopy+conditioned", ub
    )


def _open_chain(T, a):
    """Max-sum along the chain with y_0 fixed to ``a``.

    Returns (value over y_1, back-pointers) where back-pointers recover the
    rest of the assignment for any y_1.
    """
    n = len(T)
    g = T[0][a][:, :, None] + T[1]  # (b, y2, y3); clique 0 has y_1 == b
    back = []
    for i in range(2, n - 2):
        cand = g[:, :, :, None] + T[i][None, :, :, :]  # (b, yi, yi+1, yi+2)
        arg = np.argmax(cand, axis=1)
        back.append(arg)
        g = np.take_along_axis(cand, arg[:, None], axis=1)[:, 0]
    # clique n-2 covers (y_{n-2}, y_{n-1}, y_0 = a)
    cand = g + T[n - 2][:, :, a][None, :, :]  # (b, y_{n-2}, y_{n-1})
    arg_nm2 = np.argmax(cand, axis=1)
    g = np.take_along_axis(cand, arg_nm2[:, None], axis=1)[:, 0]  # (b, y_{n-1})
    # clique n-1 covers (y_{n-1}, a, b)
    cand = g + T[n - 1][:, a, :].T
    arg_nm1 = np.argmax(cand, axis=1)
    value = np.take_along_axis(cand, arg_nm1[:, None], axis=1)[:, 0]
    return value, (back, arg_nm2, arg_nm1)


def map_conditioned(tables: CliqueTableSet):
    """Exact MAP by conditioning on (y_0, y_1) and running max-sum along the
    opened chain; the best condition wins. O(n p^5) time."""
    n = tables.n
    if n < 4:
        return map_bruteforce(tables)
    T = tables.tables
    best = (-math.inf, None, None, None)
    for a in range(T[0].shape[0]):
        value, ptrs = _open_chain(T, a)
        b = int(np.argmax(value))
        if value[b] > best[0]:
            best = (value[b], a, b, ptrs)
    _, a, b, (back, arg_nm2, arg_nm1) = best
    y = [0] * n
    y[0], y[1] = a, b
    y[n - 1] = int(arg_nm1[b])
    y[n - 2] = int(arg_nm2[b, y[n - 1]])
    for i in range(n - 3, 1, -1):
        y[i] = int(back[i - 2][b, y[i + 1], y[i + 2]])
    return _result(tables, y, 0, True, "conditioned")


def map_bruteforce(tables: CliqueTableSet, limit=BRUTEFORCE_LIMIT, chunk=1 << 18):
    """Exhaustive search; ties go to the lexicographically smallest assignment."""
    sizes = tables.sizes
    n = len(sizes)
    total = math.prod(sizes)
    if total > limit:
        raise ValueError(f"{total} assignments exceeds the brute-force limit {limit}")
    best_val, best_idx = -math.inf, 0
    for start in range(0, total, chunk):
        flat = np.arange(start, min(total, start + chunk))
        Y = np.unravel_index(flat, sizes)
        s = np.zeros(flat.shape[0])
        for i, t in enumerate(tables.tables):
            s = s + t[Y[i], Y[(i + 1) % n], Y[(i + 2) % n]]
        j = int(np.argmax(s))
        if s[j] > best_val:
            best_val, best_idx = s[j], start + j
    y = [int(v) for v in np.unravel_index(best_idx, sizes)]
    return _result(tables, y, 0, True, "bruteforce")


# --------------------------------------------------------------------------
# candidates and tables


def prune_candidates(template: TemplateShape, target: Scene, theta0, p, ground_truth=None, inject=False):
    """The ``p`` targets with smallest collapsed unary cost per template point.

    Ties go to the lower target index. With ``inject`` and a ground truth, a
    missing true target replaces the last candidate.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    costs = unary_cost_matrix(template, target, theta0)
    return candidates_from_costs(costs, p, ground_truth, inject)


def candidates_from_costs(costs, p, ground_truth=None, inject=False):
    n, m = costs.shape
    k = min(p, m)
    order = np.argsort(costs, axis=1, kind="stable")[:, :k]
    cands = [row.copy() for row in order]
    if inject and ground_truth is not None:
        for i, g in enumerate(ground_truth):
            if g not in cands[i]:
                cands[i][-1] = g
                cands[i] = cands[i][np.argsort(costs[i, cands[i]], kind="stable")]
    return cands


def all_candidates(n, m):
    return [np.arange(m) for _ in range(n)]


def candidate_recall(candidates, ground_truth):
    hits = sum(int(g in c) for c, g in zip(candidates, ground_truth))
    return hits / len(candidates)


def feature_tensors(ctx: MatchContext, candidates, cfg: FeatureConfig, scale_factors=None):
    """Per-clique feature arrays (groups, k_i, k_i+1, k_i+2); theta independent.

    With equal candidate counts the arrays come stacked in one
    (n, groups, k, k, k) array, which indexes and iterates the same way.
    """
    n = len(ctx.template)
    F = [
        clique_tensor(
            ctx, i, candidates[i], candidates[(i + 1) % n], candidates[(i + 2) % n], cfg, scale_factors
        )
        for i in range(n)
    ]
    if all(f.shape == F[0].shape for f in F):
        return np.stack(F)
    return F


def tables_from_features(features, theta, candidates=None, node_losses=None):
    theta = np.asarray(theta, dtype=float)
    cands = None if candidates is None else tuple(candidates)
    if isinstance(features, np.ndarray):
        T = -np.tensordot(theta, features, axes=(0, 1))
        if node_losses is not None:
            T += np.asarray(node_losses)[:, :, None, None]
        return CliqueTableSet(tuple(T), cands)
    tables = []
    for i, F in enumerate(features):
        t = -np.tensordot(theta, F, axes=(0, 0))
        if node_losses is not None:
            t = t + np.asarray(node_losses[i])[:, None, None]
        tables.append(t)
    return CliqueTableSet(tuple(tables), cands)


def build_tables(
    template: TemplateShape,
    target: Scene,
    model: WeightModel,
    candidates,
    loss_augment=None,
    ctx: MatchContext | None = None,
) -> CliqueTableSet:
    """Clique log-potentials ``-<theta, Phi>`` over the candidate sets.

    ``loss_augment`` is ``(ground_truth, kind)``; node i's loss is added in
    clique i, where node i occupies the first slot.
    """
    cfg = model.feature_config
    if ctx is None:
        ctx = MatchContext.build(template, target, cfg, model.theta0 if cfg.unary else None)
    F = feature_tensors(ctx, candidates, cfg, model.scale_factors)
    losses = None
    if loss_augment is not None:
        y_gt, kind = loss_augment
        losses = node_loss_matrix(kind, y_gt, target, candidates)
    return tables_from_features(F, model.theta, candidates, losses)
