"""Command-line entry point: ``loopmatch <subcommand> ...``.

File formats
------------
scene     ``# width=W height=H k=K`` header, then ``<id> <x> <y> <d_1..d_K>`` rows.
          Header-less files hold bare ``<x> <y>`` rows and need --width/--height.
template  a scene file with an extra ``# order: i0 i1 ...`` line.
matches   ``<template_index> <target_index>`` per line.
model     JSON with theta0, theta, p, feature_config, scale_factors.
configs   JSON; see README for the keys of train, synth and sweep configs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import bench
from .core import (
    FeatureConfig,
    MatchInstance,
    load_matches,
    load_model,
    load_scene,
    load_template,
    save_matches,
    save_model,
    save_scene,
)
from .features import ShapeContextConfig, shape_contexts, with_shape_context
from .learn import TrainConfig, predict_higher, predict_linear, train_two_stage
from .losses import LOSSES, loss as compute_loss

log = logging.getLogger("loopmatch")


class CliError(Exception):
    """Runtime failure reported as a one-line diagnostic."""


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise CliError(f"{path}: invalid JSON ({e})") from None


def _resolve(path, base):
    return path if os.path.isabs(path) else os.path.join(base, path)


def _add_common(p, *, seed=False, model=False, jobs=False):
    if seed:
        p.add_argument("--seed", type=int, help="random seed (overrides the config)")
    if model:
        p.add_argument("--p", type=int, help="candidates kept per template point")
        p.add_argument("--loss", choices=LOSSES, help="loss used for training and reporting")
        p.add_argument("--lambda", dest="lam", type=float, help="fix lambda for both stages (no grid search)")
        p.add_argument("--max-iters", type=int, help="message-passing sweep cap")
        p.add_argument("--exact", action="store_true", help="use conditioned exact inference")
    if jobs:
        p.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="parallel test pairs")


def _with_descriptors(scene, sc_cfg=ShapeContextConfig()):
    return scene if scene.descriptors is not None else with_shape_context(scene, sc_cfg)


# --------------------------------------------------------------------------
# subcommands


def cmd_match(args):
    model = load_model(args.model)
    tmpl = load_template(args.template, args.width, args.height)
    tgt = load_scene(args.target, args.width, args.height)
    tmpl = type(tmpl)(_with_descriptors(tmpl.scene), tmpl.order)
    tgt = _with_descriptors(tgt)
    if args.p is not None:
        model = model.replace(p=args.p)
    inst = MatchInstance(tmpl, tgt, None, "match")
    if args.linear:
        y = predict_linear(inst, model.theta0)
        note = "linear assignment"
    else:
        res = predict_higher(inst, model, args.max_iters or 20, args.exact)
        y = res.assignment
        note = f"{res.method}, {res.iterations} sweeps, objective {res.objective:.6g}"
    save_matches(y, args.output)
    print(f"matched {len(tmpl)} points ({note}) -> {args.output}")
    if args.gt:
        gt = load_matches(args.gt, len(tmpl), len(tgt))
        kind = args.loss or "hamming"
        print(f"{kind} loss: {compute_loss(kind, y, gt, tgt):.6g}")
    return 0


def _train_config(d, args):
    keys = set(TrainConfig.__dataclass_fields__)
    kw = {k: v for k, v in d.items() if k in keys}
    if "feature_config" in kw:
        kw["feature_config"] = FeatureConfig.from_dict(kw["feature_config"])
    for k in ("lambda_grid", "lambda_grid_stage2"):
        if kw.get(k) is not None:
            kw[k] = tuple(kw[k])
    for flag, key in (("seed", "seed"), ("p", "p"), ("loss", "loss"), ("max_iters", "max_iters")):
        v = getattr(args, flag, None)
        if v is not None:
            kw[key] = v
    if getattr(args, "exact", False):
        kw["exact"] = True
    if getattr(args, "lam", None) is not None:
        kw["lam"] = args.lam
        kw["lambda_grid"] = kw["lambda_grid_stage2"] = (args.lam,)
    return TrainConfig(**kw)


def _training_data(d, base, seed):
    if "synthetic" in d:
        sc = dict(d["synthetic"])
        if seed is not None:
            sc["seed"] = seed
        data = bench.gen_synthetic(_synthetic_config(sc, base))
        return data.train, data.val
    if "train" in d and "val" in d:
        return bench.read_split(_resolve(d["train"], base)), bench.read_split(_resolve(d["val"], base))
    raise CliError("train config needs 'train' and 'val' directories or a 'synthetic' section")


def cmd_train(args):
    d = _read_json(args.config)
    base = os.path.dirname(os.path.abspath(args.config))
    cfg = _train_config(d, args)
    train, val = _training_data(d, base, args.seed)
    res = train_two_stage(train, val, cfg)
    save_model(res.model, args.output)
    outdir = os.path.dirname(os.path.abspath(args.output))
    stem = os.path.splitext(os.path.basename(args.output))[0]
    hist = os.path.join(outdir, f"{stem}_risk_history.csv")
    res.state2.write_history(hist)
    recall = os.path.join(outdir, f"{stem}_recall.json")
    with open(recall, "w", encoding="utf-8") as f:
        json.dump(
            {
                "p": cfg.p,
                "recall_train": res.recall_train,
                "recall_val": res.recall_val,
                "lambda1": res.lambda1,
                "lambda2": res.lambda2,
                "val_risk1": {repr(k): v for k, v in res.val_risk1.items()},
                "val_risk2": {repr(k): v for k, v in res.val_risk2.items()},
            },
            f,
            indent=2,
        )
    print(
        f"trained on {len(train)} pairs: lambda1={res.lambda1:g} lambda2={res.lambda2:g} "
        f"recall@{cfg.p}={res.recall_val:.3f} -> {args.output}"
    )
    return 0


def cmd_eval(args):
    model = load_model(args.model)
    if args.p is not None:
        model = model.replace(p=args.p)
    pairs = bench.read_split(args.pairs)
    missing = [i.name for i in pairs if i.ground_truth is None]
    if missing:
        raise CliError(f"pair {missing[0]!r} has no matches.txt")
    kind = args.loss or "hamming"
    report = bench.ExperimentReport()
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m == "linear":
            pred = lambda inst: predict_linear(inst, model.theta0)
        elif m == "higher":
            pred = lambda inst: predict_higher(inst, model, args.max_iters or 20, args.exact).assignment
        else:
            raise CliError(f"unknown method {m!r}; expected linear or higher")
        losses, ms = bench.evaluate_method(pairs, pred, kind, args.jobs)
        report.add(m, os.path.basename(os.path.normpath(args.pairs)), losses, ms)
    report.write_csv(args.output)
    for r in report.rows:
        print(f"{r.method:8s} {kind} {r.mean_loss:.5g} +- {r.std_error:.2g} ({r.n} pairs, {r.runtime_ms:.1f} ms)")
    return 0


def _synthetic_config(d, base):
    d = dict(d)
    sil = d.pop("silhouette", None)
    if sil is not None:
        d["silhouette"] = bench.load_polyline(_resolve(sil, base))
    unknown = set(d) - set(bench.SyntheticConfig.__dataclass_fields__)
    if unknown:
        raise CliError(f"unknown synthetic config keys: {sorted(unknown)}")
    return bench.SyntheticConfig(**d)


def cmd_synth(args):
    d, base = {}, os.getcwd()
    if args.config:
        d = _read_json(args.config)
        base = os.path.dirname(os.path.abspath(args.config))
    if args.seed is not None:
        d["seed"] = args.seed
    data = bench.gen_synthetic(_synthetic_config(d, base))
    bench.write_dataset(data, args.outdir)
    counts = ", ".join(f"{k}={len(v)}" for k, v in data.pairs.items())
    print(f"wrote synthetic pairs ({counts}) -> {args.outdir}")
    return 0


def cmd_sweep(args):
    cfg = bench.ExperimentConfig.load(args.config)
    over = {}
    if args.seed is not None:
        over["seeds"] = (args.seed,)
    if args.p is not None:
        over["p"] = (args.p,)
    if args.loss is not None:
        over["loss"] = args.loss
    if args.lam is not None:
        over["lambda_grid"] = over["lambda_grid_stage2"] = (args.lam,)
    if args.max_iters is not None:
        over["max_iters"] = args.max_iters
    if args.exact:
        over["exact"] = True
    over["jobs"] = args.jobs
    d = {f: getattr(cfg, f) for f in bench.ExperimentConfig.__dataclass_fields__}
    d.update(over)
    cfg = bench.ExperimentConfig(**d)
    report = bench.run_experiment(cfg)
    os.makedirs(args.outdir, exist_ok=True)
    report.write_csv(os.path.join(args.outdir, "report.csv"))
    if report.rows:
        bench.emit_plot_data(report, args.outdir)
    print(f"{len(report.rows)} report rows -> {args.outdir}")
    for r in report.rows:
        print(f"  {r.method:16s} {r.condition:32s} {r.mean_loss:.5g} +- {r.std_error:.2g} (n={r.n})")
    return 0


def cmd_sc(args):
    scene = load_scene(args.scene, args.width, args.height)
    cfg = ShapeContextConfig(args.radial_bins, args.angular_bins, args.r_inner, args.r_outer)
    sc = shape_contexts(scene.points, cfg)
    desc = sc if scene.descriptors is None else np.hstack([scene.descriptors, sc])
    save_scene(scene.with_descriptors(desc), args.output)
    print(f"appended {cfg.dim} shape-context columns to {len(scene)} points -> {args.output}")
    return 0


# --------------------------------------------------------------------------


def build_parser():
    ap = argparse.ArgumentParser(
        prog="loopmatch",
        description="Learned near-isometric point-pattern matching.",
        epilog=__doc__.split("File formats", 1)[1].replace("------------\n", "File formats:\n"),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("match", help="match a template into a target scene")
    p.add_argument("template")
    p.add_argument("target")
    p.add_argument("model")
    p.add_argument("-o", "--output", required=True, help="match file to write")
    p.add_argument("--gt", help="ground-truth match file; reports the loss")
    p.add_argument("--linear", action="store_true", help="unary model with linear assignment")
    p.add_argument("--width", type=float)
    p.add_argument("--height", type=float)
    _add_common(p, seed=True, model=True)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("train", help="two-stage training from a JSON config")
    p.add_argument("config")
    p.add_argument("-o", "--output", required=True, help="model file to write")
    _add_common(p, seed=True, model=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model on a directory of pairs")
    p.add_argument("model")
    p.add_argument("pairs", help="directory of pair subdirectories")
    p.add_argument("-o", "--output", required=True, help="report CSV to write")
    p.add_argument("--methods", default="linear,higher")
    _add_common(p, seed=True, model=True, jobs=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write a synthetic dataset directory")
    p.add_argument("outdir")
    p.add_argument("--config", help="JSON with synthetic generator fields")
    _add_common(p, seed=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sweep", help="run an experiment config; write report and plot CSVs")
    p.add_argument("config")
    p.add_argument("-o", "--outdir", required=True)
    _add_common(p, seed=True, model=True, jobs=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("sc", help="append Shape Context columns to a scene file")
    p.add_argument("scene")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--width", type=float)
    p.add_argument("--height", type=float)
    p.add_argument("--radial-bins", type=int, default=5)
    p.add_argument("--angular-bins", type=int, default=12)
    p.add_argument("--r-inner", type=float, default=0.125)
    p.add_argument("--r-outer", type=float, default=2.0)
    _add_common(p, seed=True)
    p.set_defaults(func=cmd_sc)
    return ap


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:  # usage errors (2) and --help (0)
        return int(e.code or 0)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except (CliError, OSError, ValueError, KeyError) as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"loopmatch: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
