"""Domain types and text/JSON ingestion for scenes, shapes, matches and models."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

MODEL_VERSION = 1

GROUP_NAMES = ("unary", "distance", "adjacency", "scaled_distance", "angle")


class FormatError(ValueError):
    """A malformed input file. ``line`` is 1-based, or None for whole-file errors."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class MissingDescriptorsError(ValueError):
    pass


class DegenerateGeometryError(ValueError):
    pass


class Point2(NamedTuple):
    x: float
    y: float


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Scene:
    """Landmarks of one image, with optional per-point descriptors.

    ``points`` is stored as a read-only ``(n, 2)`` float array.
    """

    points: np.ndarray
    width: float
    height: float
    descriptors: np.ndarray | None = None
    id: str = ""

    def __post_init__(self):
        pts = _frozen(self.points)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 1:
            raise ValueError("scene needs at least one 2D point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("width and height must be positive")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "width", float(self.width))
        object.__setattr__(self, "height", float(self.height))
        if self.descriptors is not None:
            d = _frozen(self.descriptors)
            if d.ndim != 2 or d.shape[0] != pts.shape[0]:
                raise ValueError("inconsistent descriptor dimension")
            if not np.all(np.isfinite(d)):
                raise ValueError("descriptors must be finite")
            object.__setattr__(self, "descriptors", d)

    def __len__(self):
        return self.points.shape[0]

    @property
    def k(self):
        return 0 if self.descriptors is None else self.descriptors.shape[1]

    def point(self, i) -> Point2:
        return Point2(*self.points[i])

    def require_descriptors(self):
        if self.descriptors is None:
            raise MissingDescriptorsError(f"scene {self.id!r} has no descriptors")
        return self.descriptors

    def with_descriptors(self, descriptors):
        return Scene(self.points, self.width, self.height, descriptors, self.id)

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        if (self.width, self.height, self.id) != (other.width, other.height, other.id):
            return False
        if not np.array_equal(self.points, other.points):
            return False
        if (self.descriptors is None) != (other.descriptors is None):
            return False
        return self.descriptors is None or np.array_equal(self.descriptors, other.descriptors)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class TemplateShape:
    """An ordered, cyclic subset of a scene's points."""

    scene: Scene
    order: tuple

    def __post_init__(self):
        order = tuple(int(i) for i in self.order)
        if len(order) < 3:
            raise ValueError("template needs at least 3 points")
        if len(set(order)) != len(order):
            raise ValueError("template indices must be distinct")
        if min(order) < 0 or max(order) >= len(self.scene):
            raise ValueError("template index out of range")
        object.__setattr__(self, "order", order)

    def __len__(self):
        return len(self.order)

    def index(self, i):
        """Scene index of template point ``i`` (cyclic)."""
        return self.order[i % len(self.order)]

    def neighbour(self, i, step=1):
        """Template position ``step`` places after ``i`` around the loop."""
        return (i + step) % len(self.order)

    @property
    def points(self):
        return self.scene.points[list(self.order)]

    @property
    def descriptors(self):
        return self.scene.require_descriptors()[list(self.order)]

    def __eq__(self, other):
        if not isinstance(other, TemplateShape):
            return NotImplemented
        return self.order == other.order and self.scene == other.scene

    __hash__ = None


@dataclass(frozen=True)
class Assignment:
    """Target index for each template position. Need not be injective."""

    map: tuple

    def __post_init__(self):
        object.__setattr__(self, "map", tuple(int(u) for u in self.map))

    def __len__(self):
        return len(self.map)

    def __iter__(self):
        return iter(self.map)

    def __getitem__(self, i):
        return self.map[i]

    def validate(self, n_template, n_target):
        if len(self.map) != n_template:
            raise ValueError(f"assignment has {len(self.map)} entries, template has {n_template}")
        for u in self.map:
            if not 0 <= u < n_target:
                raise ValueError(f"target index {u} out of range [0, {n_target})")
        return self

    def collisions(self):
        """Number of template points sharing a target with an earlier one."""
        return len(self.map) - len(set(self.map))

    def as_array(self):
        return np.asarray(self.map, dtype=np.intp)


@dataclass(frozen=True)
class MatchInstance:
    template: TemplateShape
    target: Scene
    ground_truth: Assignment | None = None
    name: str = ""

    def __post_init__(self):
        if self.ground_truth is not None:
            self.ground_truth.validate(len(self.template), len(self.target))


@dataclass(frozen=True)
class FeatureConfig:
    unary: bool = True
    distance: bool = True
    adjacency: bool = True
    scaled_distance: bool = True
    angle: bool = True
    # value substituted for scaled-distance/angle groups on coincident points
    degenerate_penalty: float = 10.0

    @property
    def groups(self):
        return tuple(g for g in GROUP_NAMES if getattr(self, g))

    def to_dict(self):
        d = {g: getattr(self, g) for g in GROUP_NAMES}
        d["degenerate_penalty"] = self.degenerate_penalty
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(GROUP_NAMES) - {"degenerate_penalty"}
        if unknown:
            raise ValueError(f"unknown feature_config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def geometric(cls):
        return cls(unary=False, adjacency=False)


@dataclass(frozen=True, eq=False)
class WeightModel:
    """Stage-1 unary weights plus stage-2 group weights."""

    theta0: np.ndarray
    theta: np.ndarray
    p: int = 10
    feature_config: FeatureConfig = field(default_factory=FeatureConfig)
    scale_factors: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "theta0", _frozen(self.theta0).reshape(-1))
        object.__setattr__(self, "theta", _frozen(self.theta).reshape(-1))
        n_groups = len(self.feature_config.groups)
        if self.scale_factors is None:
            object.__setattr__(self, "scale_factors", _frozen(np.ones(n_groups)))
        else:
            object.__setattr__(self, "scale_factors", _frozen(self.scale_factors).reshape(-1))
        if self.theta.shape[0] != n_groups:
            raise ValueError(
                f"theta has dimension {self.theta.shape[0]} but feature_config has {n_groups} groups"
            )
        if self.scale_factors.shape[0] != n_groups:
            raise ValueError("scale_factors must have one entry per active group")
        if np.any(self.scale_factors <= 0):
            raise ValueError("scale_factors must be positive")
        if int(self.p) < 1:
            raise ValueError("p must be a positive integer")
        object.__setattr__(self, "p", int(self.p))

    @property
    def groups(self):
        return self.feature_config.groups

    def replace(self, **changes):
        d = dict(
            theta0=self.theta0,
            theta=self.theta,
            p=self.p,
            feature_config=self.feature_config,
            scale_factors=self.scale_factors,
        )
        d.update(changes)
        return WeightModel(**d)

    def __eq__(self, other):
        if not isinstance(other, WeightModel):
            return NotImplemented
        return (
            self.p == other.p
            and self.feature_config == other.feature_config
            and np.array_equal(self.theta0, other.theta0)
            and np.array_equal(self.theta, other.theta)
            and np.array_equal(self.scale_factors, other.scale_factors)
        )

    __hash__ = None


# --------------------------------------------------------------------------
# scene / template files


def _parse_header(text, path):
    body = text.lstrip("#").strip()
    fields = {}
    for tok in body.split():
        if "=" not in tok:
            raise FormatError(f"bad header token {tok!r}", path, 1)
        key, val = tok.split("=", 1)
        fields[key] = val
    try:
        width = float(fields["width"])
        height = float(fields["height"])
        k = int(fields.get("k", 0))
    except KeyError as e:
        raise FormatError(f"header missing {e.args[0]}", path, 1) from None
    except ValueError as e:
        raise FormatError(f"bad header value: {e}", path, 1) from None
    if not (width > 0 and height > 0):
        raise FormatError("width and height must be positive", path, 1)
    if k < 0:
        raise FormatError("k must be non-negative", path, 1)
    return width, height, k, fields.get("id")


def _read_scene_lines(lines, path, width=None, height=None, scene_id=None):
    rows = [(i + 1, ln.strip()) for i, ln in enumerate(lines)]
    rows = [(no, ln) for no, ln in rows if ln]
    if not rows:
        raise FormatError("empty scene file", path)
    first_no, first = rows[0]
    header = first.startswith("#") and "width=" in first
    if header:
        width, height, k, hid = _parse_header(first, path)
        scene_id = scene_id or hid
        data = rows[1:]
    else:
        if width is None or height is None:
            raise FormatError("legacy x/y file needs width and height", path)
        if not (width > 0 and height > 0):
            raise FormatError("width and height must be positive", path)
        k = None
        data = rows
    pts, desc = [], []
    for no, ln in data:
        if ln.startswith("#"):
            continue
        toks = ln.split()
        try:
            vals = [float(t) for t in toks]
        except ValueError:
            raise FormatError(f"non-numeric value in {ln!r}", path, no) from None
        if header:
            if len(vals) < 3:
                raise FormatError("expected '<id> <x> <y> [descriptors]'", path, no)
            if len(vals) - 3 != k:
                raise FormatError(
                    f"inconsistent descriptor dimension: expected {k}, got {len(vals) - 3}",
                    path,
                    no,
                )
            pts.append(vals[1:3])
            desc.append(vals[3:])
        else:
            if len(vals) != 2:
                raise FormatError("legacy rows must be '<x> <y>'", path, no)
            pts.append(vals)
        if not all(math.isfinite(v) for v in vals):
            raise FormatError("non-finite value", path, no)
    if not pts:
        raise FormatError("scene has no points", path)
    descriptors = np.array(desc, dtype=float) if header and k > 0 else None
    if scene_id is None:
        scene_id = os.path.splitext(os.path.basename(str(path)))[0] if path else ""
    return Scene(np.array(pts, dtype=float), width, height, descriptors, scene_id)


def load_scene(path, width=None, height=None) -> Scene:
    """Read a scene file.

    Header form: ``# width=W height=H k=K`` then ``<id> <x> <y> <d_1..d_K>`` rows.
    Files without the header are read as bare ``<x> <y>`` rows (CMU house
    landmark files), in which case ``width`` and ``height`` must be given.
    """
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    return _read_scene_lines(lines, path, width, height)


def parse_scene(text, width=None, height=None, scene_id="") -> Scene:
    return _read_scene_lines(text.splitlines(), None, width, height, scene_id or None)


def format_scene(scene: Scene, extra_comments=()) -> str:
    header = f"# width={scene.width!r} height={scene.height!r} k={scene.k}"
    if scene.id and not any(c.isspace() for c in scene.id):
        header += f" id={scene.id}"
    out = [header]
    out.extend(f"# {c}" for c in extra_comments)
    for i, (x, y) in enumerate(scene.points):
        row = [str(i), repr(float(x)), repr(float(y))]
        if scene.descriptors is not None:
            row.extend(repr(float(v)) for v in scene.descriptors[i])
        out.append(" ".join(row))
    return "\n".join(out) + "\n"


def save_scene(scene: Scene, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(format_scene(scene))


def load_template(path, width=None, height=None) -> TemplateShape:
    """Read a scene file carrying an ``# order: i0 i1 ...`` line."""
    scene = load_scene(path, width, height)
    order = None
    with open(path, encoding="utf-8") as f:
        for no, ln in enumerate(f, 1):
            s = ln.strip()
            if s.startswith("#") and s.lstrip("#").strip().startswith("order:"):
                try:
                    order = [int(t) for t in s.split("order:", 1)[1].split()]
                except ValueError:
                    raise FormatError("bad order line", path, no) from None
    if order is None:
        raise FormatError("template file has no '# order:' line", path)
    try:
        return TemplateShape(scene, tuple(order))
    except ValueError as e:
        raise FormatError(str(e), path) from None


def save_template(template: TemplateShape, path):
    order = "order: " + " ".join(str(i) for i in template.order)
    with open(path, "w", encoding="utf-8") as f:
        f.write(format_scene(template.scene, extra_comments=[order]))


# --------------------------------------------------------------------------
# match files


def load_matches(path, n_template=None, n_target=None) -> Assignment:
    """Read ``<template_index> <target_index>`` lines into an Assignment."""
    pairs = {}
    with open(path, encoding="utf-8") as f:
        for no, ln in enumerate(f, 1):
            s = ln.split("#", 1)[0].strip()
            if not s:
                continue
            toks = s.split()
            if len(toks) != 2:
                raise FormatError("expected '<template_index> <target_index>'", path, no)
            try:
                t, u = int(toks[0]), int(toks[1])
            except ValueError:
                raise FormatError("indices must be integers", path, no) from None
            if t in pairs:
                raise FormatError(f"duplicate template index {t}", path, no)
            if t < 0 or u < 0:
                raise FormatError("indices must be non-negative", path, no)
            if n_target is not None and u >= n_target:
                raise FormatError(f"target index {u} out of range [0, {n_target})", path, no)
            pairs[t] = u
    n = n_template if n_template is not None else (max(pairs) + 1 if pairs else 0)
    missing = [t for t in range(n) if t not in pairs]
    if missing:
        raise FormatError(f"missing template index {missing[0]}", path)
    extra = [t for t in pairs if t >= n]
    if extra:
        raise FormatError(f"template index {extra[0]} out of range [0, {n})", path)
    return Assignment(tuple(pairs[t] for t in range(n)))


def save_matches(assignment: Assignment, path, comment=None):
    with open(path, "w", encoding="utf-8") as f:
        if comment:
            f.write(f"# {comment}\n")
        for t, u in enumerate(assignment.map):
            f.write(f"{t} {u}\n")


# --------------------------------------------------------------------------
# model files


def model_to_dict(model: WeightModel) -> dict:
    return {
        "version": MODEL_VERSION,
        "theta0": [float(v) for v in model.theta0],
        "theta": [float(v) for v in model.theta],
        "p": model.p,
        "feature_config": model.feature_config.to_dict(),
        "scale_factors": [float(v) for v in model.scale_factors],
        # template distances use the template width, target distances the target width
        "distance_normalisation": "per-scene-width",
    }


def model_from_dict(d: dict, path=None) -> WeightModel:
    if d.get("version") != MODEL_VERSION:
        raise FormatError(f"unsupported model version {d.get('version')!r}", path)
    try:
        cfg = FeatureConfig.from_dict(d["feature_config"])
        return WeightModel(
            theta0=np.array(d["theta0"], dtype=float),
            theta=np.array(d["theta"], dtype=float),
            p=d["p"],
            feature_config=cfg,
            scale_factors=np.array(d["scale_factors"], dtype=float),
        )
    except KeyError as e:
        raise FormatError(f"model file missing field {e.args[0]!r}", path) from None
    except (TypeError, ValueError) as e:
        raise FormatError(str(e), path) from None


def save_model(model: WeightModel, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(model_to_dict(model), f, indent=2)
        f.write("\n")


def load_model(path) -> WeightModel:
    with open(path, encoding="utf-8") as f:
        try:
            d = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"invalid JSON: {e}", path, e.lineno) from None
    return model_from_dict(d, path)


def as_points(points: Sequence) -> np.ndarray:
    a = np.asarray(points, dtype=float)
    return a.reshape(-1, 2)
