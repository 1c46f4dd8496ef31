import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from gesm.graph import CsrMatrix

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def csr_from_edges(n, edges, symmetric=True):
    pairs = set()
    for u, v in edges:
        if u == v:
            continue
        pairs.add((int(u), int(v)))
        if symmetric:
            pairs.add((int(v), int(u)))
    rows = [p[0] for p in sorted(pairs)]
    cols = [p[1] for p in sorted(pairs)]
    return CsrMatrix.from_coo(rows, cols, np.ones(len(rows)), (n, n))


@st.composite
def graphs(draw, min_nodes=1, max_nodes=20):
    n = draw(st.integers(min_nodes, max_nodes))
    pairs = st.tuples(st.integers(0, n - 1), st.integers(0, n - 1))
    edges = draw(st.lists(pairs, max_size=3 * n))
    return n, edges


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
