import numpy as np
import pytest
import scipy.sparse as sp

from meshsurrogate.coarsen import build_hierarchy
from meshsurrogate.datagen import make_benchmark
from meshsurrogate.mesh import Graph


@pytest.fixture(scope="session")
def small_benchmark():
    """Tiny plate dataset (5x4 grid, 6 sims, 5 times) plus its mesh."""
    return make_benchmark(seed=0, n_sims=6, n_times=5, nx=5, ny=4)


@pytest.fixture(scope="session")
def small_hierarchy(small_benchmark):
    _, mesh = small_benchmark
    return build_hierarchy(mesh, [12, 6])


def random_connected_graph(rng: np.random.Generator, n: int) -> Graph:
    """Random spanning tree plus a few extra edges; always connected."""
    rows, cols = [], []
    for v in range(1, n):
        rows.append(int(rng.integers(0, v)))
        cols.append(v)
    for _ in range(int(rng.integers(0, n))):
        u, v = (int(x) for x in rng.integers(0, n, 2))
        if u != v:
            rows.append(min(u, v))
            cols.append(max(u, v))
    a = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n)).tocsr()
    a = a + a.T
    a.data[:] = 1.0
    a.setdiag(0)
    a.eliminate_zeros()
    return Graph(a)
