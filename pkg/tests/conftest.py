import numpy as np
import pytest

from loopmatch.core import Scene, TemplateShape
from loopmatch.infer import CliqueTableSet


def random_scene(rng, m, k=0, width=640.0, height=480.0):
    pts = rng.uniform([0, 0], [width, height], size=(m, 2))
    desc = rng.random((m, k)) if k else None
    return Scene(pts, width, height, desc, "rand")


def random_tables(rng, n, p_lo, p_hi=None):
    """Clique tables with i.i.d. uniform entries and random candidate counts."""
    p_hi = p_lo if p_hi is None else p_hi
    sizes = rng.integers(p_lo, p_hi + 1, size=n)
    tables = [rng.random((sizes[i], sizes[(i + 1) % n], sizes[(i + 2) % n])) for i in range(n)]
    return CliqueTableSet(tables)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_pair(rng):
    scene = random_scene(rng, 12, k=3)
    tmpl = TemplateShape(scene, (0, 3, 5, 7, 9))
    return tmpl, scene


_PERMS = {}


def brute_lap(S):
    """Exhaustive best injective map; the first maximiser in lexicographic order wins.

    Scores are accumulated row by row, the same order ``assignment_score`` uses,
    so equal optima compare equal bit for bit.
    """
    import itertools

    n, m = S.shape
    if (n, m) not in _PERMS:
        _PERMS[(n, m)] = np.array(list(itertools.permutations(range(m), n)), dtype=np.intp).reshape(-1, n)
    P = _PERMS[(n, m)]
    tot = np.zeros(len(P))
    for i in range(n):
        tot += S[i, P[:, i]]
    k = int(np.argmax(tot))
    return tot[k], tuple(int(c) for c in P[k])


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
