import numpy as np
import pytest
from hypothesis import strategies as st

from homcar.graph import AdjacencyGraph, lattice_graph, parse_graph


def random_connected_graph(rng: np.random.Generator, n: int, extra: int = 0) -> AdjacencyGraph:
    """Random spanning tree plus up to ``extra`` random chords, unit weights."""
    order = rng.permutation(n)
    edges = {}
    for k in range(1, n):
        i, j = int(order[k]), int(order[rng.integers(k)])
        edges[(min(i, j), max(i, j))] = 1.0
    for _ in range(extra):
        i, j = rng.choice(n, 2, replace=False)
        edges[(int(min(i, j)), int(max(i, j)))] = 1.0
    return AdjacencyGraph(tuple(f"u{k}" for k in range(n)), edges)


@st.composite
def connected_graphs(draw, min_size=2, max_size=12):
    n = draw(st.integers(min_size, max_size))
    seed = draw(st.integers(0, 2**32 - 1))
    extra = draw(st.integers(0, n))
    return random_connected_graph(np.random.default_rng(seed), n, extra)


@pytest.fixture
def p3():
    return parse_graph("a,b\nb,c")


@pytest.fixture
def pair():
    return parse_graph("a,b")


@pytest.fixture
def cycle4():
    return parse_graph("a,b\nb,c\nc,d\nd,a")


@pytest.fixture
def star():
    return parse_graph("h,a\nh,b\nh,c")


@pytest.fixture
def lattice15():
    return lattice_graph(15, 15)
