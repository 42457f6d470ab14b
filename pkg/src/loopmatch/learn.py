"""Large-margin structured learning of the unary and clique weights.

Both stages minimise

    (1/N) sum_i xi_i(theta) + lam/2 ||theta||^2,
    xi_i(theta) = max(0, max_y <h(y) - h(y_i), theta> + loss(y, y_i))

with a bundle (cutting-plane) method by default, or by projected stochastic
subgradient descent with step 1/(lam t). The inner max is the loss-augmented
MAP problem: a linear assignment in stage 1 and loop-clique inference over
pruned candidates in stage 2. Both are solved exactly, so every cutting
plane is a valid lower bound and the bundle method reports its duality gap.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize, nnls

from .assign import assignment_score, solve_lap, unary_scores
from .core import Assignment, FeatureConfig, MatchInstance, WeightModel
from .features import MatchContext, clique_feature, unary_cost_matrix
from .infer import (
    CliqueTableSet,
    all_candidates,
    candidate_recall,
    candidates_from_costs,
    feature_tensors,
    map_conditioned,
    map_loopy,
    tables_from_features,
)
from .losses import loss as compute_loss
from .losses import node_loss_matrix

log = logging.getLogger(__name__)

# Candidates per point in the scale-factor calibration sample. Fixed so the
# relative group scales, and so the meaning of lambda, do not move with p.
CALIBRATION_P = 10


SOLVERS = ("bundle", "subgradient")


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1e-2
    loss: str = "hamming"
    epochs: int = 20
    seed: int = 0
    p: int = 10
    lambda_grid: tuple = (1e-4, 1e-3, 1e-2, 1e-1)
    lambda_grid_stage2: tuple | None = (1e-4, 1e-3, 1e-2, 1e-1, 1.0)
    feature_config: FeatureConfig = field(default_factory=FeatureConfig)
    inject_ground_truth: bool = True
    max_iters: int = 20
    exact: bool = False
    solver: str = "bundle"  # or "subgradient"
    max_passes: int = 100  # bundle: passes over the data, one cutting plane each
    tol: float = 1e-3  # bundle: stop at this relative duality gap

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if self.epochs < 1 or self.max_passes < 1:
            raise ValueError("epochs and max_passes must be >= 1")
        if self.solver not in SOLVERS:
            raise ValueError(f"unknown solver {self.solver!r}; expected one of {SOLVERS}")
        if not self.tol >= 0:
            raise ValueError("tol must be >= 0")

    def replace(self, **kw):
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(kw)
        return TrainConfig(**d)


@dataclass
class SolverState:
    theta: np.ndarray
    slacks: np.ndarray
    risk_history: list = field(default_factory=list)  # (epoch, objective, train risk)
    # min over training instances of slack minus the loss of the prediction
    bound_gap: float = math.nan
    lower_bound: float = math.nan  # bundle only: certified bound on the optimum

    def write_history(self, path, val_risks=None):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "objective", "train_risk", "val_risk"])
            for k, (epoch, obj, risk) in enumerate(self.risk_history):
                vr = "" if val_risks is None else val_risks[k]
                w.writerow([epoch, repr(obj), repr(risk), vr])


def _training_set(data):
    data = list(data)
    if not data:
        raise ValueError("empty training set")
    for inst in data:
        if inst.ground_truth is None:
            raise ValueError(f"instance {inst.name!r} has no ground truth")
    return data


# --------------------------------------------------------------------------
# problems


class UnaryProblem:
    """Stage 1: h(y) = -sum_i Phi0(s_i, y_i), inference by linear assignment."""

    def __init__(self, data, loss="hamming"):
        self.data = _training_set(data)
        self.loss = loss
        self.ds = [inst.template.descriptors for inst in self.data]
        self.du = [inst.target.require_descriptors() for inst in self.data]
        self.node_losses = [
            node_loss_matrix(loss, inst.ground_truth, inst.target) for inst in self.data
        ]
        self.dim = self.ds[0].shape[1]

    def __len__(self):
        return len(self.data)

    def joint_feature(self, j, y):
        return -((self.ds[j] - self.du[j][list(y)]) ** 2).sum(axis=0)

    def _scores(self, j, theta):
        return -unary_cost_matrix(self.data[j].template, self.data[j].target, theta)

    def predict(self, j, theta):
        return solve_lap(self._scores(j, theta))

    def hinge(self, j, theta):
        """(slack, loss-augmented argmax, subgradient) for instance j."""
        s = self._scores(j, theta)
        aug = s + self.node_losses[j]
        y = solve_lap(aug)
        gt = self.data[j].ground_truth
        xi = assignment_score(aug, y.map) - assignment_score(s, gt.map)
        if xi <= 0:
            return 0.0, y, np.zeros(self.dim)
        return xi, y, self.joint_feature(j, y) - self.joint_feature(j, gt)

    def loss_of(self, j, y):
        inst = self.data[j]
        return compute_loss(self.loss, y, inst.ground_truth, inst.target)


@dataclass
class PreparedPair:
    instance: MatchInstance
    ctx: MatchContext
    candidates: list
    features: list
    node_losses: list | None
    h_gt: np.ndarray | None
    recall: float


def prepare_pair(inst, theta0, cfg: FeatureConfig, p, scale_factors=None, loss=None, inject=False):
    """Pruned candidates and theta-independent clique features for one pair."""
    tmpl, tgt = inst.template, inst.target
    if theta0 is not None and np.size(theta0) and tmpl.scene.descriptors is not None and tgt.descriptors is not None:
        costs = unary_cost_matrix(tmpl, tgt, theta0)
        cands = candidates_from_costs(costs, p, inst.ground_truth, inject)
    else:
        if cfg.unary:
            raise ValueError("unary group is active but descriptors or theta0 are missing")
        if p < len(tgt):
            raise ValueError("pruning below the target size needs descriptors")
        cands = all_candidates(len(tmpl), len(tgt))
    ctx = MatchContext.build(tmpl, tgt, cfg, theta0 if cfg.unary else None)
    F = feature_tensors(ctx, cands, cfg, scale_factors)
    node_losses = h_gt = None
    recall = math.nan
    if inst.ground_truth is not None:
        recall = candidate_recall(cands, inst.ground_truth)
        if loss is not None:
            node_losses = node_loss_matrix(loss, inst.ground_truth, tgt, cands)
        h_gt = joint_feature_clique(ctx, inst.ground_truth, cfg, scale_factors)
    return PreparedPair(inst, ctx, cands, F, node_losses, h_gt, recall)


def _rescaled(pp: PreparedPair, scale):
    s4 = scale[:, None, None, None]
    return PreparedPair(
        pp.instance,
        pp.ctx,
        pp.candidates,
        pp.features * scale[None, :, None, None, None]
        if isinstance(pp.features, np.ndarray)
        else [F * s4 for F in pp.features],
        pp.node_losses,
        None if pp.h_gt is None else pp.h_gt * scale,
        pp.recall,
    )


def joint_feature_clique(ctx: MatchContext, y, cfg: FeatureConfig, scale_factors=None):
    """-sum of clique feature vectors around the loop, evaluated pointwise."""
    n = len(ctx.template)
    total = np.zeros(len(cfg.groups))
    for i in range(n):
        total -= clique_feature(ctx, i, y[i], y[(i + 1) % n], y[(i + 2) % n], cfg, scale_factors)
    return total


def joint_feature(instance: MatchInstance, y, model: WeightModel, stage=2):
    """h(S, U, y). Stage 1 returns -sum Phi0; stage 2 the clique group sums."""
    if stage == 1:
        ds = instance.template.descriptors
        du = instance.target.require_descriptors()
        return -((ds - du[list(y)]) ** 2).sum(axis=0)
    cfg = model.feature_config
    ctx = MatchContext.build(instance.template, instance.target, cfg, model.theta0 if cfg.unary else None)
    return joint_feature_clique(ctx, y, cfg, model.scale_factors)


def _local_features(F, local):
    n = len(F)
    return sum(F[i][:, local[i], local[(i + 1) % n], local[(i + 2) % n]] for i in range(n))


class CliqueProblem:
    """Stage 2: loop-clique model over pruned candidates."""

    def __init__(self, data, theta0, cfg: FeatureConfig, p, loss="hamming",
                 scale_factors=None, inject=True, max_iters=20, exact=False,
                 calibration_p=CALIBRATION_P):
        self.data = _training_set(data)
        self.loss = loss
        self.cfg = cfg
        self.max_iters = max_iters
        self.exact = exact
        self.theta0 = np.zeros(0) if theta0 is None else np.asarray(theta0, dtype=float)
        self.p = p
        raw = [prepare_pair(inst, theta0, cfg, p, None, loss, inject) for inst in self.data]
        if scale_factors is None:
            if p == calibration_p or not np.size(self.theta0):
                scale_factors = calibrate_scale_factors([r.features for r in raw])
            else:
                scale_factors = scale_factors_for(self.data, theta0, cfg, calibration_p)
        self.scale_factors = np.asarray(scale_factors, dtype=float)
        self.pairs = [_rescaled(r, self.scale_factors) for r in raw]
        self.dim = len(cfg.groups)

    def __len__(self):
        return len(self.pairs)

    @property
    def recall(self):
        return float(np.mean([pp.recall for pp in self.pairs]))

    def _infer(self, tables):
        return map_conditioned(tables) if self.exact else map_loopy(tables, self.max_iters)

    def tables(self, j, theta, augment=False):
        pp = self.pairs[j]
        return tables_from_features(
            pp.features, theta, pp.candidates, pp.node_losses if augment else None
        )

    def predict(self, j, theta):
        return self._infer(self.tables(j, theta)).assignment

    def hinge(self, j, theta):
        pp = self.pairs[j]
        res = self._infer(self.tables(j, theta, augment=True))
        xi = res.objective - float(theta @ pp.h_gt)
        if xi <= 0:
            return 0.0, res.assignment, np.zeros(self.dim)
        h_star = -_local_features(pp.features, res.local)
        return xi, res.assignment, h_star - pp.h_gt

    def joint_feature(self, j, y):
        pp = self.pairs[j]
        return joint_feature_clique(pp.ctx, y, self.cfg, self.scale_factors)

    def loss_of(self, j, y):
        inst = self.pairs[j].instance
        return compute_loss(self.loss, y, inst.ground_truth, inst.target)

    def model(self, theta):
        return WeightModel(self.theta0, theta, self.p, self.cfg, self.scale_factors)


def column_generation(problem, j, theta):
    """Most violated assignment for training instance ``j`` and its slack."""
    xi, y, _ = problem.hinge(j, np.asarray(theta, dtype=float))
    return y, xi


def scale_factors_for(data, theta0, cfg: FeatureConfig, p=CALIBRATION_P):
    """Scale factors from the clique tables over the top-``p`` unary candidates."""
    feats = [prepare_pair(inst, theta0, cfg, p, None, None, inst.ground_truth is not None).features
             for inst in data]
    return calibrate_scale_factors(feats)


def calibrate_scale_factors(feature_sets, max_samples=200_000, seed=0):
    """1/std of each group over all table entries, 1 where a group is constant."""
    chunks = [t.reshape(t.shape[0], -1) for F in feature_sets for t in F]
    if not chunks:
        raise ValueError("no features to calibrate on")
    per_group = np.concatenate(chunks, axis=1)
    if per_group.shape[1] > max_samples:
        rng = np.random.default_rng(seed)
        per_group = per_group[:, rng.choice(per_group.shape[1], max_samples, replace=False)]
    std = per_group.std(axis=1)
    return np.where(std > 0, 1.0 / np.where(std > 0, std, 1.0), 1.0)


# --------------------------------------------------------------------------
# solver


def evaluate_objective(problem, theta, lam):
    """(regularised objective, slacks, empirical risk of plain predictions)."""
    theta = np.asarray(theta, dtype=float)
    slacks = np.array([problem.hinge(j, theta)[0] for j in range(len(problem))])
    obj = float(slacks.mean() + 0.5 * lam * theta @ theta)
    return obj, slacks


def empirical_risk(problem, theta):
    return float(np.mean([problem.loss_of(j, problem.predict(j, theta)) for j in range(len(problem))]))


def subgradient_train(problem, lam, epochs, seed=0, theta_init=None, track_risk=True):
    """Projected stochastic subgradient with iterate averaging.

    Iterates are averaged with weights proportional to t, which discounts
    the large early steps. Returns the best iterate seen (by regularised
    objective, evaluated once per epoch on the averaged iterate) with its
    exact slacks and ``bound_gap``, which is >= 0 whenever each slack
    bounds the loss of the corresponding prediction.
    """
    rng = np.random.default_rng(seed)
    N, dim = len(problem), problem.dim
    theta = np.zeros(dim) if theta_init is None else np.array(theta_init, dtype=float)
    # ||theta*||^2 <= 2 J(0) / lam, and J(0) is the mean of the largest losses
    obj0, slacks0 = evaluate_objective(problem, np.zeros(dim), lam)
    radius = math.sqrt(2.0 * max(obj0, 1e-12) / lam)
    avg = theta.copy()
    best_theta, best_obj, best_slacks = np.zeros(dim), obj0, slacks0
    obj_init, slacks_init = evaluate_objective(problem, theta, lam)
    if obj_init < best_obj:
        best_theta, best_obj, best_slacks = theta.copy(), obj_init, slacks_init
    history = []
    t = 0
    for epoch in range(1, epochs + 1):
        for j in rng.permutation(N):
            t += 1
            _, _, g = problem.hinge(int(j), theta)
            theta = theta - (lam * theta + g) / (lam * t)
            nrm = np.linalg.norm(theta)
            if nrm > radius:
                theta *= radius / nrm
            avg += (theta - avg) * (2.0 / (t + 2))  # weights proportional to t
        obj, slacks = evaluate_objective(problem, avg, lam)
        if obj < best_obj:
            best_theta, best_obj, best_slacks = avg.copy(), obj, slacks
        risk = empirical_risk(problem, best_theta) if track_risk else math.nan
        history.append((epoch, best_obj, risk))
        log.debug("epoch %d objective %.6g (averaged %.6g) risk %.4g", epoch, best_obj, obj, risk)
    return SolverState(best_theta, best_slacks, history, _bound_gap(problem, best_theta, best_slacks))


def _bound_gap(problem, theta, slacks):
    losses = np.array([problem.loss_of(j, problem.predict(j, theta)) for j in range(len(problem))])
    return float(np.min(slacks - losses))


def _cutting_plane(problem, theta):
    """Risk, slacks and the linearisation ``a . theta + b`` of the risk at theta."""
    N = len(problem)
    slacks = np.empty(N)
    a = np.zeros(problem.dim)
    for j in range(N):
        slacks[j], _, g = problem.hinge(j, theta)
        a += g
    risk = float(slacks.mean())
    a /= N
    return risk, slacks, a, risk - float(a @ theta)


def _bundle_qp(A, b, lam, x0):
    """min lam/2 |w|^2 + r  s.t.  r >= A w + b.

    Returns (w, lower) where ``lower`` is the dual value of multipliers
    recovered on the active planes. Any point of the simplex gives a dual
    value below the model minimum, so the bound holds however loosely the
    QP was solved.
    """
    d = A.shape[1]
    res = minimize(
        lambda z: 0.5 * lam * z[:d] @ z[:d] + z[d],
        x0,
        jac=lambda z: np.concatenate([lam * z[:d], [1.0]]),
        method="SLSQP",
        constraints=[{
            "type": "ineq",
            "fun": lambda z: z[d] - (A @ z[:d] + b),
            "jac": lambda z: np.hstack([-A, np.ones((len(b), 1))]),
        }],
        options={"ftol": 1e-12, "maxiter": 500},
    )
    w = res.x[:d]
    vals = A @ w + b
    active = np.flatnonzero(vals >= vals.max() - 1e-9 * max(1.0, abs(vals.max())))
    # stationarity lam w + A^T alpha = 0 on the active set, sum alpha = 1
    rho = max(1.0, float(np.abs(A[active]).max()))
    M = np.vstack([A[active].T, np.full((1, active.size), rho)])
    alpha_act, _ = nnls(M, np.concatenate([-lam * w, [rho]]))
    alpha = np.zeros(len(b))
    alpha[active] = alpha_act / alpha_act.sum() if alpha_act.sum() > 0 else 1.0 / active.size
    g = A.T @ alpha
    return w, float(b @ alpha - 0.5 * g @ g / lam)


def bundle_train(problem, lam, max_passes=100, tol=1e-3, theta_init=None, track_risk=True):
    """Cutting-plane minimisation of the regularised risk.

    Each pass solves every loss-augmented problem at the current point and
    adds the resulting linearisation of the risk to a piecewise-linear
    model (which also keeps the plane r >= 0). The next point minimises the
    regularised model. Stops once the best objective is within ``tol``
    (relative) of the model minimum, which bounds the true optimum from below.
    The training risk is filled in for the last history row only.
    """
    dim = problem.dim
    theta = np.zeros(dim) if theta_init is None else np.array(theta_init, dtype=float)
    planes_a, planes_b = [np.zeros(dim)], [0.0]
    best_theta, best_obj, best_slacks = theta, math.inf, None
    lower = -math.inf
    history = []
    for k in range(1, max_passes + 1):
        risk, slacks, a, b = _cutting_plane(problem, theta)
        obj = risk + 0.5 * lam * float(theta @ theta)
        if obj < best_obj:
            best_theta, best_obj, best_slacks = theta.copy(), obj, slacks
        planes_a.append(a)
        planes_b.append(b)
        A, B = np.array(planes_a), np.array(planes_b)
        x0 = np.concatenate([theta, [max(0.0, float(np.max(A @ theta + B)))]])
        theta, dual = _bundle_qp(A, B, lam, x0)
        lower = max(lower, dual)
        history.append((k, best_obj, math.nan))
        log.debug("pass %d objective %.6g bound %.6g", k, best_obj, lower)
        if best_obj - lower <= tol * abs(best_obj):
            break
    if track_risk:
        history[-1] = (k, best_obj, empirical_risk(problem, best_theta))
    return SolverState(best_theta, best_slacks, history, _bound_gap(problem, best_theta, best_slacks), lower)


def fit_weights(problem, cfg: TrainConfig, theta_init=None):
    """Run the configured solver on ``problem`` at ``cfg.lam``."""
    if cfg.solver == "bundle":
        return bundle_train(problem, cfg.lam, cfg.max_passes, cfg.tol)
    return subgradient_train(problem, cfg.lam, cfg.epochs, cfg.seed, theta_init=theta_init)


def train_stage1(data, cfg: TrainConfig):
    """Learn the unary weights theta0. Returns (theta0, SolverState)."""
    problem = UnaryProblem(data, cfg.loss)
    state = fit_weights(problem, cfg)
    return state.theta, state


def stage2_problem(data, theta0, cfg: TrainConfig, scale_factors=None):
    return CliqueProblem(
        data,
        theta0,
        cfg.feature_config,
        cfg.p,
        cfg.loss,
        scale_factors,
        cfg.inject_ground_truth,
        cfg.max_iters,
        cfg.exact,
    )


def train_stage2(data, theta0, cfg: TrainConfig, scale_factors=None, problem=None):
    """Learn the clique group weights. Returns (WeightModel, SolverState)."""
    if problem is None:
        problem = stage2_problem(data, theta0, cfg, scale_factors)
    state = fit_weights(problem, cfg, theta_init=np.ones(problem.dim))
    return problem.model(state.theta), state


# --------------------------------------------------------------------------
# prediction and model selection


def predict_linear(instance: MatchInstance, theta0):
    return solve_lap(unary_scores(instance.template, instance.target, theta0))


def predict_higher(instance: MatchInstance, model: WeightModel, max_iters=20, exact=False):
    pp = prepare_pair(
        MatchInstance(instance.template, instance.target, None, instance.name),
        model.theta0,
        model.feature_config,
        model.p,
        model.scale_factors,
    )
    tables = tables_from_features(pp.features, model.theta, pp.candidates)
    res = map_conditioned(tables) if exact else map_loopy(tables, max_iters)
    return res


def validation_risk(data, predict, loss):
    data = list(data)
    if not data:
        raise ValueError("empty validation set")
    return float(
        np.mean([compute_loss(loss, predict(inst), inst.ground_truth, inst.target) for inst in data])
    )


def select_lambda(data_train, data_val, cfg: TrainConfig, stage=1, theta0=None, grid=None):
    """Grid search on validation risk; ties go to the larger lambda.

    Returns (best lambda, {lambda: validation risk}, fitted result for best).
    """
    grid = tuple(grid if grid is not None else cfg.lambda_grid)
    if not grid:
        raise ValueError("empty lambda grid")
    risks, fitted = {}, {}
    problem = None
    if stage == 2:
        problem = stage2_problem(data_train, theta0, cfg)
    for lam in sorted(set(grid)):
        c = cfg.replace(lam=lam)
        if stage == 1:
            th, state = train_stage1(data_train, c)
            risk = validation_risk(data_val, lambda inst: predict_linear(inst, th), cfg.loss)
            fitted[lam] = (th, state)
        else:
            model, state = train_stage2(data_train, theta0, c, problem=problem)
            risk = validation_risk(
                data_val, lambda inst: predict_higher(inst, model, c.max_iters, c.exact).assignment, cfg.loss
            )
            fitted[lam] = (model, state)
        risks[lam] = risk
        log.info("stage %d lambda %g validation risk %.4g", stage, lam, risk)
    best = min(risks.values())
    chosen = max(lam for lam, r in risks.items() if r == best)
    return chosen, risks, fitted[chosen]


@dataclass
class TwoStageResult:
    model: WeightModel
    lambda1: float
    lambda2: float
    val_risk1: dict
    val_risk2: dict
    state1: SolverState
    state2: SolverState
    recall_train: float
    recall_val: float


def train_two_stage(data_train, data_val, cfg: TrainConfig, stage1=None):
    """Stage 1 with lambda chosen on validation, then stage 2 likewise.

    ``stage1`` reuses an earlier ``select_lambda(..., stage=1)`` result, so
    several values of p can share one unary model.
    """
    if stage1 is None:
        stage1 = select_lambda(data_train, data_val, cfg, stage=1)
    lam1, risks1, (theta0, state1) = stage1
    grid2 = cfg.lambda_grid_stage2 or cfg.lambda_grid
    lam2, risks2, (model, state2) = select_lambda(
        data_train, data_val, cfg, stage=2, theta0=theta0, grid=grid2
    )
    train_recall = pruning_recall(data_train, theta0, cfg.p)
    val_recall = pruning_recall(data_val, theta0, cfg.p)
    return TwoStageResult(model, lam1, lam2, risks1, risks2, state1, state2, train_recall, val_recall)


def pruning_recall(data, theta0, p):
    """Mean fraction of true matches kept among the top-p unary candidates."""
    return float(
        np.mean(
            [
                candidate_recall(
                    candidates_from_costs(unary_cost_matrix(i.template, i.target, theta0), p),
                    i.ground_truth,
                )
                for i in data
            ]
        )
    )


def unlearned_model(k, cfg: FeatureConfig = FeatureConfig(), p=10, scale_factors=None):
    """Uniform descriptor weights and equal group weights."""
    return WeightModel(np.ones(k), np.ones(len(cfg.groups)), p, cfg, scale_factors)
