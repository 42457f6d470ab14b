import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loopmatch.core import (
    Assignment,
    FeatureConfig,
    FormatError,
    MatchInstance,
    MissingDescriptorsError,
    Scene,
    TemplateShape,
    WeightModel,
    format_scene,
    load_matches,
    load_model,
    load_scene,
    load_template,
    parse_scene,
    save_matches,
    save_model,
    save_scene,
    save_template,
)

from conftest import random_scene


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_scene_header_parse(tmp_path):
    p = write(tmp_path, "s.txt", "# width=640 height=480 k=2\n0 10.0 20.0 0.5 0.5\n")
    s = load_scene(p)
    assert len(s) == 1 and s.k == 2
    assert s.width == 640 and s.height == 480
    assert s.point(0) == (10.0, 20.0)
    np.testing.assert_array_equal(s.descriptors, [[0.5, 0.5]])


def test_scene_short_descriptor_row(tmp_path):
    p = write(tmp_path, "s.txt", "# width=640 height=480 k=2\n0 10.0 20.0 0.5\n")
    with pytest.raises(FormatError, match="inconsistent descriptor dimension") as e:
        load_scene(p)
    assert e.value.line == 2


def test_scene_k0_and_bad_size(tmp_path):
    s = load_scene(write(tmp_path, "a.txt", "# width=10 height=5 k=0\n0 1 2\n1 3 4\n"))
    assert len(s) == 2 and s.descriptors is None
    with pytest.raises(FormatError):
        load_scene(write(tmp_path, "b.txt", "# width=0 height=5 k=0\n0 1 2\n"))
    with pytest.raises(FormatError):
        load_scene(write(tmp_path, "c.txt", "# width=10 height=5 k=0\n0 1 zz\n"))


def test_legacy_house_format(tmp_path):
    rng = np.random.default_rng(0)
    pts = rng.uniform(0, 500, size=(30, 2))
    text = "\n".join(f"  {x:.4f}   {y:.4f}" for x, y in pts) + "\n"
    p = write(tmp_path, "house.seq0", text)
    s = load_scene(p, width=576, height=384)
    assert len(s) == 30
    np.testing.assert_allclose(s.points, pts, atol=1e-4)
    with pytest.raises(FormatError):
        load_scene(p)  # no header, no size


def test_scene_invariants():
    with pytest.raises(ValueError):
        Scene(np.zeros((0, 2)), 1, 1)
    with pytest.raises(ValueError):
        Scene([[np.nan, 0]], 1, 1)
    with pytest.raises(ValueError):
        Scene([[0, 0]], -1, 1)
    with pytest.raises(ValueError):
        Scene([[0, 0], [1, 1]], 1, 1, descriptors=np.zeros((3, 2)))
    s = Scene([[0, 0]], 1, 1)
    with pytest.raises(MissingDescriptorsError):
        s.require_descriptors()
    with pytest.raises(ValueError):
        s.points[0, 0] = 5.0  # read-only


def test_scene_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    s = random_scene(rng, 17, k=5)
    s = Scene(s.points * np.pi, s.width, s.height, s.descriptors / 3.0, "rt")
    path = tmp_path / "rt.txt"
    save_scene(s, path)
    assert load_scene(path) == s
    assert parse_scene(format_scene(s), scene_id="rt") == s


def test_template_roundtrip_and_cyclic(tmp_path):
    rng = np.random.default_rng(4)
    s = random_scene(rng, 8, k=2)
    t = TemplateShape(s, (5, 1, 2, 7))
    save_template(t, tmp_path / "t.txt")
    t2 = load_template(tmp_path / "t.txt")
    assert t2 == t
    n = len(t)
    assert t.neighbour(n - 1) == 0
    assert t.neighbour(n - 2, 2) == 0
    assert t.index(n) == t.index(0) == 5
    with pytest.raises(FormatError):
        load_template(write(tmp_path, "no_order.txt", "# width=1 height=1 k=0\n0 0 0\n"))


@pytest.mark.parametrize("order", [(0, 1), (0, 1, 1), (0, 1, 9)])
def test_template_invariants(order):
    s = Scene(np.arange(10.0).reshape(5, 2), 10, 10)
    with pytest.raises(ValueError):
        TemplateShape(s, order)


def test_load_matches(tmp_path):
    a = load_matches(write(tmp_path, "m1", "0 0\n1 1\n2 2\n"), 3)
    assert a.map == (0, 1, 2)
    with pytest.raises(FormatError, match="missing"):
        load_matches(write(tmp_path, "m2", "0 0\n1 1\n"), 3)
    with pytest.raises(FormatError, match="duplicate"):
        load_matches(write(tmp_path, "m3", "0 0\n0 1\n1 1\n"), 2)
    with pytest.raises(FormatError, match="out of range"):
        load_matches(write(tmp_path, "m4", "0 0\n1 9\n"), 2, n_target=5)
    b = load_matches(write(tmp_path, "m5", "# comment\n0 5\n1 5  # same target\n"), 2)
    assert b.map == (5, 5) and b.collisions() == 1


@given(st.lists(st.integers(0, 50), min_size=1, max_size=30))
@settings(max_examples=50, deadline=None)
def test_matches_roundtrip(tmp_path_factory, targets):
    path = tmp_path_factory.mktemp("m") / "m.txt"
    a = Assignment(targets)
    save_matches(a, path, comment="x")
    assert load_matches(path, len(targets), 51) == a


def test_match_instance_validates_gt():
    s = Scene(np.arange(10.0).reshape(5, 2), 10, 10)
    t = TemplateShape(s, (0, 1, 2))
    MatchInstance(t, s, Assignment((0, 1, 4)))
    with pytest.raises(ValueError):
        MatchInstance(t, s, Assignment((0, 1, 5)))
    with pytest.raises(ValueError):
        MatchInstance(t, s, Assignment((0, 1)))


def test_model_roundtrip(tmp_path):
    m = WeightModel(np.zeros(60), np.zeros(5))
    save_model(m, tmp_path / "m.json")
    assert load_model(tmp_path / "m.json") == m
    rng = np.random.default_rng(0)
    m = WeightModel(rng.normal(size=60), rng.normal(size=5), 10, FeatureConfig(), rng.uniform(0.1, 9, 5))
    save_model(m, tmp_path / "m2.json")
    assert load_model(tmp_path / "m2.json") == m
    g = WeightModel(np.ones(3), np.ones(3), 4, FeatureConfig.geometric())
    save_model(g, tmp_path / "g.json")
    assert load_model(tmp_path / "g.json") == g


def test_model_errors(tmp_path):
    import json

    d = json.loads(json.dumps({
        "version": 1, "theta0": [0.0], "theta": [0.0, 0.0, 0.0], "p": 10,
        "feature_config": FeatureConfig().to_dict(), "scale_factors": [1.0] * 5,
    }))
    (tmp_path / "dim.json").write_text(json.dumps(d))
    with pytest.raises(FormatError, match="dimension"):
        load_model(tmp_path / "dim.json")
    d["version"] = 99
    (tmp_path / "ver.json").write_text(json.dumps(d))
    with pytest.raises(FormatError, match="version"):
        load_model(tmp_path / "ver.json")
    with pytest.raises(ValueError):
        WeightModel(np.ones(2), np.ones(5), scale_factors=np.array([1, 1, 0, 1, 1.0]))
    with pytest.raises(ValueError):
        WeightModel(np.ones(2), np.ones(5), p=0)
