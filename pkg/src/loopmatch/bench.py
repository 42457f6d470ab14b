"""Experiment protocols: synthetic silhouettes, house frame pairs, reports."""

from __future__ import annotations

import csv
import glob
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from itertools import combinations

import numpy as np

from .core import (
    Assignment,
    FeatureConfig,
    MatchInstance,
    Scene,
    TemplateShape,
    load_scene,
)
from .features import ShapeContextConfig, with_shape_context
from .infer import map_loopy, tables_from_features
from .learn import (
    TrainConfig,
    predict_higher,
    predict_linear,
    prepare_pair,
    scale_factors_for,
    select_lambda,
    train_two_stage,
    unlearned_model,
)
from .losses import loss as compute_loss

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


# --------------------------------------------------------------------------
# silhouettes


def smooth_blob(n_vertices=200, seed=0, center=(400.0, 300.0), radius=250.0, harmonics=5):
    """Closed random blob: a circle with a few low-frequency radial harmonics."""
    rng = np.random.default_rng(seed)
    t = np.linspace(0.0, 2 * np.pi, n_vertices, endpoint=False)
    r = np.ones_like(t)
    for k in range(2, 2 + harmonics):
        r += rng.uniform(0.02, 0.15) / math.sqrt(k - 1) * np.cos(k * t + rng.uniform(0, 2 * np.pi))
    r *= radius
    return np.stack([center[0] + r * np.cos(t), center[1] + r * np.sin(t)], axis=1)


def load_polyline(path):
    pts = np.loadtxt(path, comments="#", ndmin=2)
    if pts.shape[1] != 2:
        raise ValueError("polyline rows must be '<x> <y>'")
    return pts


def default_silhouette():
    with resources.files("loopmatch").joinpath("data/silhouette.txt").open() as f:
        return np.loadtxt(f, comments="#", ndmin=2)


def sample_on_polyline(poly, count, rng):
    """Points uniform by arc length on the closed polyline ``poly``."""
    closed = np.vstack([poly, poly[:1]])
    seg = np.diff(closed, axis=0)
    lengths = np.hypot(seg[:, 0], seg[:, 1])
    total = lengths.sum()
    if not total > 0:
        raise ValueError("silhouette has zero length")
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    s = rng.uniform(0.0, total, size=count)
    k = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(lengths) - 1)
    frac = np.where(lengths[k] > 0, (s - cum[k]) / np.where(lengths[k] > 0, lengths[k], 1), 0.0)
    return closed[k] + frac[:, None] * seg[k]


# --------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticConfig:
    n_shape: int = 25
    n_outliers: int = 0
    epsilon: float = 0.0
    n_images: int = 10
    silhouette: np.ndarray | None = None
    width: float = 800.0
    height: float = 600.0
    seed: int = 0
    resample_outliers: bool = True  # fresh outlier positions per image
    sc: ShapeContextConfig = field(default_factory=ShapeContextConfig)

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.n_shape < 3:
            raise ValueError("n_shape must be >= 3")
        if self.n_outliers < 0 or self.n_images < 2:
            raise ValueError("need n_outliers >= 0 and n_images >= 2")


@dataclass
class SyntheticData:
    template: TemplateShape  # unperturbed shape, for reference
    images: dict  # split -> list of (Scene, shape indices)
    pairs: dict  # split -> list of MatchInstance

    @property
    def train(self):
        return self.pairs["train"]

    @property
    def val(self):
        return self.pairs["val"]

    @property
    def test(self):
        return self.pairs["test"]


def gen_synthetic(cfg: SyntheticConfig) -> SyntheticData:
    """Perturbed copies of random silhouette points, paired within each split.

    Every image holds the shape points and outliers jittered uniformly in
    [-eps/2, eps/2] and stored in a random order; the template order is the
    sampling order of the shape points, which is random along the contour.
    Outliers are redrawn on the silhouette for each image unless
    ``resample_outliers`` is off.
    """
    rng = np.random.default_rng(cfg.seed)
    poly = default_silhouette() if cfg.silhouette is None else np.asarray(cfg.silhouette, float)
    n_total = cfg.n_shape + cfg.n_outliers
    base = sample_on_polyline(poly, n_total, rng)
    base_scene = Scene(base, cfg.width, cfg.height, None, "base")
    template = TemplateShape(base_scene, tuple(range(cfg.n_shape)))
    half = cfg.epsilon / 2.0
    images, pairs = {}, {}
    for split in SPLITS:
        imgs = []
        for k in range(cfg.n_images):
            src = base
            if cfg.resample_outliers and cfg.n_outliers:
                src = np.vstack([base[: cfg.n_shape], sample_on_polyline(poly, cfg.n_outliers, rng)])
            pts = src + rng.uniform(-half, half, size=base.shape)
            perm = rng.permutation(n_total)
            # stored[j] = pts[perm[j]], so point q ends up at position inv[q]
            inv = np.empty(n_total, dtype=np.intp)
            inv[perm] = np.arange(n_total)
            scene = Scene(pts[perm], cfg.width, cfg.height, None, f"{split}_{k:02d}")
            scene = with_shape_context(scene, cfg.sc)
            imgs.append((scene, tuple(int(v) for v in inv[: cfg.n_shape])))
        images[split] = imgs
        split_pairs = []
        for a, b in combinations(range(cfg.n_images), 2):
            sa, ia = imgs[a]
            sb, ib = imgs[b]
            split_pairs.append(
                MatchInstance(TemplateShape(sa, ia), sb, Assignment(ib), f"{split}_{a:02d}_{b:02d}")
            )
        pairs[split] = split_pairs
    return SyntheticData(template, images, pairs)


# --------------------------------------------------------------------------
# house sequence


def load_house_sequence(directory, width=576.0, height=384.0, pattern="house.seq*"):
    """Frames in the legacy ``<x> <y>`` format, sorted by frame number."""
    paths = glob.glob(os.path.join(directory, pattern))
    if not paths:
        raise FileNotFoundError(f"no frames matching {pattern!r} in {directory}")

    def frame_no(p):
        digits = "".join(ch for ch in os.path.basename(p) if ch.isdigit())
        return int(digits) if digits else 0

    return [load_scene(p, width, height) for p in sorted(paths, key=frame_no)]


def angular_order(points):
    c = points.mean(axis=0)
    ang = np.arctan2(points[:, 1] - c[1], points[:, 0] - c[0])
    return tuple(int(i) for i in np.argsort(ang, kind="stable"))


def house_pairs(frames, baseline, order=None, sc_cfg=ShapeContextConfig()):
    """All pairs (f, f + baseline); the landmark index is the correspondence."""
    frames = list(frames)
    if not frames:
        raise ValueError("no frames")
    if baseline < 0 or baseline >= len(frames):
        raise ValueError(f"baseline {baseline} must be in [0, {len(frames)})")
    n = len(frames[0])
    if any(len(f) != n for f in frames):
        raise ValueError("frames must share a landmark count")
    frames = [f if f.descriptors is not None else with_shape_context(f, sc_cfg) for f in frames]
    if order is None:
        order = angular_order(frames[0].points)
    gt = Assignment(tuple(order))
    out = []
    for f in range(len(frames) - baseline):
        tmpl = TemplateShape(frames[f], tuple(order))
        out.append(MatchInstance(tmpl, frames[f + baseline], gt, f"{f}_{f + baseline}"))
    return out


def split_thirds(items):
    """Contiguous thirds: (train, val, test)."""
    items = list(items)
    k = len(items)
    a, b = k // 3, (2 * k) // 3
    return items[:a], items[a:b], items[b:]


# --------------------------------------------------------------------------
# reports


@dataclass
class ReportRow:
    method: str
    condition: str
    mean_loss: float
    std_error: float
    runtime_ms: float
    n: int
    params: dict = field(default_factory=dict)


@dataclass
class ExperimentReport:
    rows: list = field(default_factory=list)
    bp_series: list = field(default_factory=list)  # dicts: condition, iterations, ms, mean_loss
    notes: dict = field(default_factory=dict)

    def add(self, method, condition, losses, times_ms, **params):
        losses = np.asarray(losses, dtype=float)
        m = losses.size
        se = float(losses.std(ddof=1) / math.sqrt(m)) if m > 1 else 0.0
        self.rows.append(
            ReportRow(method, condition, float(losses.mean()), se, float(np.mean(times_ms)), m, params)
        )

    def row(self, method, condition):
        for r in self.rows:
            if r.method == method and r.condition == condition:
                return r
        raise KeyError((method, condition))

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["method", "condition", "mean", "stderr", "ms", "n"])
            for r in self.rows:
                w.writerow([r.method, r.condition, repr(r.mean_loss), repr(r.std_error), repr(r.runtime_ms), r.n])


def _timed(fn, *args):
    t0 = time.perf_counter()
    out = fn(*args)
    return out, 1000.0 * (time.perf_counter() - t0)


def evaluate_method(pairs, predict, loss, jobs=1):
    """(losses, per-pair ms) for ``predict(instance) -> Assignment``."""

    def one(inst):
        y, ms = _timed(predict, inst)
        return compute_loss(loss, y, inst.ground_truth, inst.target), ms

    if jobs and jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            results = list(ex.map(one, pairs))
    else:
        results = [one(inst) for inst in pairs]
    return [r[0] for r in results], [r[1] for r in results]


def bp_iteration_series(pairs, model, loss, max_iters=20):
    """Loss and time of uncertified message passing truncated at 1..max_iters sweeps."""
    prepared = [
        prepare_pair(MatchInstance(i.template, i.target, None, i.name), model.theta0,
                     model.feature_config, model.p, model.scale_factors)
        for i in pairs
    ]
    tables = [tables_from_features(pp.features, model.theta, pp.candidates) for pp in prepared]
    out = []
    for it in range(1, max_iters + 1):
        losses, ms = [], []
        for inst, t in zip(pairs, tables):
            res, dt = _timed(lambda tt: map_loopy(tt, max_iters=it, tol=0.0, fallback=False), t)
            losses.append(compute_loss(loss, res.assignment, inst.ground_truth, inst.target))
            ms.append(dt)
        out.append((it, float(np.mean(ms)), float(np.mean(losses))))
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "synthetic"
    methods: tuple = ("linear", "higher")
    seeds: tuple = (0,)
    p: tuple = (10,)
    loss: str = "endpoint"
    epochs: int = 10
    lambda_grid: tuple = (1e-4, 1e-3, 1e-2, 1e-1)
    lambda_grid_stage2: tuple | None = (1e-4, 1e-3, 1e-2, 1e-1, 1.0)
    solver: str = "bundle"
    max_passes: int = 100
    max_iters: int = 20
    exact: bool = False
    feature_config: FeatureConfig = field(default_factory=FeatureConfig)
    # synthetic
    n_shape: int = 25
    n_images: int = 10
    outliers: tuple = (0,)
    epsilon: tuple = (0.0,)
    silhouette: str | None = None
    # house
    data_dir: str | None = None
    baselines: tuple = ()
    width: float = 576.0
    height: float = 384.0
    bp_series: bool = False
    jobs: int = 1

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "feature_config" in d:
            d["feature_config"] = FeatureConfig.from_dict(d["feature_config"])
        for k in ("methods", "seeds", "p", "lambda_grid", "lambda_grid_stage2", "outliers",
                  "epsilon", "baselines"):
            if k in d and d[k] is not None:
                d[k] = tuple(d[k])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            cfg = cls.from_dict(json.load(f))
        base = os.path.dirname(os.path.abspath(path))
        fixes = {}
        for key in ("silhouette", "data_dir"):
            v = getattr(cfg, key)
            if v and not os.path.isabs(v):
                fixes[key] = os.path.join(base, v)
        if fixes:
            d = {f: getattr(cfg, f) for f in cls.__dataclass_fields__}
            d.update(fixes)
            cfg = cls(**d)
        return cfg

    def train_config(self, seed, p):
        return TrainConfig(
            loss=self.loss,
            epochs=self.epochs,
            seed=seed,
            p=p,
            lambda_grid=self.lambda_grid,
            lambda_grid_stage2=self.lambda_grid_stage2,
            solver=self.solver,
            max_passes=self.max_passes,
            feature_config=self.feature_config,
            max_iters=self.max_iters,
            exact=self.exact,
        )


METHODS = ("linear", "higher", "linear_unlearned", "higher_unlearned")


def _conditions(cfg: ExperimentConfig):
    """(label, params, seed -> (train, val, test)) for each data condition."""
    if cfg.experiment == "synthetic":
        sil = load_polyline(cfg.silhouette) if cfg.silhouette else None
        for n_out in cfg.outliers:
            for eps in cfg.epsilon:
                def make(seed, n_out=n_out, eps=eps):
                    d = gen_synthetic(
                        SyntheticConfig(cfg.n_shape, n_out, eps, cfg.n_images, sil, seed=seed)
                    )
                    return d.train, d.val, d.test
                yield f"outliers={n_out},eps={eps:g}", {"outliers": n_out, "epsilon": eps}, make
    elif cfg.experiment == "house":
        if not cfg.data_dir or not os.path.isdir(cfg.data_dir):
            raise FileNotFoundError(f"house data directory {cfg.data_dir!r} not found")
        frames = load_house_sequence(cfg.data_dir, cfg.width, cfg.height)
        for b in cfg.baselines:
            def make(seed, b=b):
                return split_thirds(house_pairs(frames, b))
            yield f"baseline={b}", {"baseline": b}, make
    else:
        raise ValueError(f"unknown experiment {cfg.experiment!r}")


def run_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    """Train and evaluate each requested method on every condition and seed.

    Test losses are pooled over seeds before the mean and standard error.
    """
    report = ExperimentReport()
    methods = tuple(cfg.methods)
    bad = set(methods) - set(METHODS)
    if bad:
        raise ValueError(f"unknown methods {sorted(bad)}")
    if not methods:
        return report
    for label, params, make in _conditions(cfg):
        pooled = {}
        for seed in cfg.seeds:
            train, val, test = make(seed)
            k = train[0].target.k
            need_learned = any(m in ("linear", "higher") for m in methods)
            stage1 = None
            if need_learned:
                stage1 = select_lambda(train, val, cfg.train_config(seed, cfg.p[0]), stage=1)
            for p in cfg.p:
                tc = cfg.train_config(seed, p)
                res = train_two_stage(train, val, tc, stage1) if need_learned else None
                if "higher_unlearned" in methods:
                    base = unlearned_model(k, cfg.feature_config, p)
                    base = base.replace(scale_factors=scale_factors_for(train, base.theta0, cfg.feature_config))
                for m in methods:
                    if m.startswith("linear") and p != cfg.p[0]:
                        continue
                    if m == "linear":
                        pred = lambda inst, th=res.model.theta0: predict_linear(inst, th)
                    elif m == "linear_unlearned":
                        pred = lambda inst: predict_linear(inst, np.ones(k))
                    elif m == "higher":
                        pred = lambda inst, mod=res.model: predict_higher(
                            inst, mod, cfg.max_iters, cfg.exact
                        ).assignment
                    else:
                        pred = lambda inst, mod=base: predict_higher(
                            inst, mod, cfg.max_iters, cfg.exact
                        ).assignment
                    losses, ms = evaluate_method(test, pred, cfg.loss, cfg.jobs)
                    key = (m, p if m.startswith("higher") else None)
                    pooled.setdefault(key, ([], []))
                    pooled[key][0].extend(losses)
                    pooled[key][1].extend(ms)
                if cfg.bp_series and res is not None and "higher" in methods:
                    for it, ms_, l_ in bp_iteration_series(test, res.model, cfg.loss, cfg.max_iters):
                        report.bp_series.append(
                            {"condition": label, "p": p, "seed": seed, "iterations": it, "ms": ms_,
                             "mean_loss": l_}
                        )
                if res is not None:
                    report.notes[(label, seed, p)] = {
                        "lambda1": res.lambda1,
                        "lambda2": res.lambda2,
                        "recall_train": res.recall_train,
                        "recall_val": res.recall_val,
                        "theta": res.model.theta.tolist(),
                    }
        for (m, p), (losses, ms) in pooled.items():
            cond = label if p is None else f"{label},p={p}"
            report.add(m, cond, losses, ms, p=p, **params)
    return report


def emit_plot_data(report: ExperimentReport, outdir):
    """Write one CSV per figure family into ``outdir``; returns the paths."""
    if not report.rows:
        raise ValueError("empty report")
    os.makedirs(outdir, exist_ok=True)
    paths = []
    base_rows = [r for r in report.rows if "baseline" in r.params]
    if base_rows:
        path = os.path.join(outdir, "loss_vs_baseline.csv")
        with open(path, "w", newline="") as f:
            f.write("# baseline: frame separation; mean/stderr: test loss over pairs\n")
            w = csv.writer(f)
            w.writerow(["method", "p", "baseline", "mean", "stderr", "n"])
            for r in base_rows:
                w.writerow([r.method, r.params.get("p") or "", r.params["baseline"], r.mean_loss, r.std_error, r.n])
        paths.append(path)
    eps_rows = [r for r in report.rows if "epsilon" in r.params]
    if eps_rows:
        path = os.path.join(outdir, "loss_vs_epsilon.csv")
        with open(path, "w", newline="") as f:
            f.write("# epsilon: jitter width in pixels; mean/stderr: test loss over pairs\n")
            w = csv.writer(f)
            w.writerow(["method", "outliers", "p", "epsilon", "mean", "stderr", "n"])
            for r in eps_rows:
                w.writerow([r.method, r.params["outliers"], r.params.get("p") or "", r.params["epsilon"],
                            r.mean_loss, r.std_error, r.n])
        paths.append(path)
    path = os.path.join(outdir, "runtime.csv")
    with open(path, "w", newline="") as f:
        f.write("# ms: mean wall time per test pair; bp rows: truncated message passing\n")
        w = csv.writer(f)
        w.writerow(["method", "condition", "bp_iterations", "ms", "mean", "stderr"])
        for r in report.rows:
            w.writerow([r.method, r.condition, "", r.runtime_ms, r.mean_loss, r.std_error])
        for s in report.bp_series:
            w.writerow(["higher_bp", f"{s['condition']},p={s['p']},seed={s['seed']}", s["iterations"],
                        s["ms"], s["mean_loss"], ""])
    paths.append(path)
    return paths


# --------------------------------------------------------------------------
# dataset directories


def write_dataset(data: SyntheticData, outdir):
    """One directory per pair with template.txt, target.txt, matches.txt."""
    from .core import save_matches, save_scene, save_template

    for split, pairs in data.pairs.items():
        for inst in pairs:
            d = os.path.join(outdir, split, inst.name)
            os.makedirs(d, exist_ok=True)
            save_template(inst.template, os.path.join(d, "template.txt"))
            save_scene(inst.target, os.path.join(d, "target.txt"))
            save_matches(inst.ground_truth, os.path.join(d, "matches.txt"))


def read_split(directory):
    """MatchInstances from a directory of pair subdirectories."""
    from .core import load_matches, load_template

    out = []
    for d in sorted(glob.glob(os.path.join(directory, "*"))):
        if not os.path.isdir(d):
            continue
        tmpl = load_template(os.path.join(d, "template.txt"))
        tgt = load_scene(os.path.join(d, "target.txt"))
        gt_path = os.path.join(d, "matches.txt")
        gt = load_matches(gt_path, len(tmpl), len(tgt)) if os.path.exists(gt_path) else None
        out.append(MatchInstance(tmpl, tgt, gt, os.path.basename(d)))
    if not out:
        raise FileNotFoundError(f"no pair directories under {directory}")
    return out
