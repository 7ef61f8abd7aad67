import numpy as np
import pytest

from afemmg import afem, assembly, fespace, problems
from afemmg.mesh import MeshHierarchy, read_mesh_file


@pytest.fixture(scope="session")
def lshape():
    return problems.load_builtin_mesh("lshape")


@pytest.fixture(scope="session")
def crisscross():
    return problems.load_builtin_mesh("square_crisscross")


@pytest.fixture(scope="session")
def two_tri():
    return problems.load_builtin_mesh("square_two")


@pytest.fixture(scope="session")
def checkerboard():
    return problems.load_builtin_mesh("checkerboard")


def make_lshape_hierarchy(p, max_levels, theta=0.5, lambda_stop=0.1):
    """AFEM-generated L-shape hierarchy driven by the standalone multigrid
    solver (the generation recipe of the reference experiments)."""
    cfg = afem.AfemConfig(theta=theta, lambda_stop=lambda_stop, solver="MG",
                          p=p, max_levels=max_levels)
    _, hierarchy, _, _ = afem.adaptive_loop(
        problems.get_problem("lshape_poisson"), cfg)
    return hierarchy


class _HierarchyCache:
    def __init__(self):
        self._store = {}

    def lshape(self, p, max_levels):
        key = (p, max_levels)
        for (cp, cl), h in self._store.items():
            if cp == p and cl >= max_levels:
                return h.truncated(max_levels)
        self._store[key] = make_lshape_hierarchy(p, max_levels)
        return self._store[key]


@pytest.fixture(scope="session")
def hierarchies():
    """Cache of AFEM-generated L-shape hierarchies keyed by (p, levels)."""
    return _HierarchyCache()


def prepared_system(hierarchy, p, f=1.0, K=None):
    """(space, A, b, K) on the finest level of a hierarchy."""
    from afemmg import precond

    space = fespace.build_space(hierarchy.top, p)
    K = K or assembly.DiffusionField.identity()
    A = assembly.assemble_stiffness(space, K)
    b = assembly.assemble_load(space, f)
    ws = precond.setup(hierarchy, space, A, K)
    return space, A, b, ws


def small_random_hierarchy(level0, n_rounds=4, seed=0, frac=0.35):
    """Locally refined hierarchy from random marking (test geometry)."""
    h = MeshHierarchy(level0)
    rng = np.random.default_rng(seed)
    for _ in range(n_rounds):
        nt = h.top.n_triangles
        marked = rng.choice(nt, size=max(1, int(frac * nt)), replace=False)
        h.refine(marked)
    return h
