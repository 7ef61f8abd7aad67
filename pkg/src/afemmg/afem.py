"""Adaptive loop: solve with an iterative solver until the energy increment
is small relative to the estimator, mark by the Dörfler criterion, refine by
NVB, and carry the iterate to the next mesh by nested iteration.  Keeps a
per-step log with cumulative dof and cost counters.
"""

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import assembly, estimator, fespace, krylov, precond
from .krylov import FixedPointSession, GpcgSession, PcgSession

SOLVER_NAMES = ("MG", "GPCG+MG", "PCG+AS", "PCG+sMG", "PCG+BPX",
                "PCG+MG", "PCG+nsMG")

# solvers with a uniform contraction guarantee (safe inside the loop)
CONTRACTIVE_SOLVERS = ("MG", "GPCG+MG", "PCG+AS", "PCG+sMG")


class AfemError(Exception):
    pass


class InsufficientData(AfemError):
    pass


@dataclass
class AfemConfig:
    """Adaptivity parameters and termination budget."""

    theta: float = 0.5
    lambda_stop: float = 0.1
    solver: str = "GPCG+MG"
    p: int = 1
    max_levels: Optional[int] = None
    max_dofs: Optional[int] = None
    max_cum_dofs: Optional[float] = None
    solver_cap: int = 500
    with_exact: bool = False

    def __post_init__(self):
        if not 0 < self.theta <= 1:
            raise AfemError("theta must lie in (0, 1]")
        if self.lambda_stop <= 0:
            raise AfemError("lambda_stop must be positive")
        if self.p < 1:
            raise AfemError("p must be >= 1")
        if self.solver not in SOLVER_NAMES:
            raise AfemError("unknown solver %r" % (self.solver,))
        if (self.max_levels is None and self.max_dofs is None
                and self.max_cum_dofs is None):
            raise AfemError("no termination budget given")


@dataclass
class AfemStep:
    level: int
    k: int
    n_elements: int
    n_dofs: int
    eta: float
    increment: float
    cum_dofs: int
    cum_cost: int
    wall_s: float
    quasi_error: Optional[float] = None


@dataclass
class AfemLog:
    steps: list = field(default_factory=list)
    k_final: dict = field(default_factory=dict)
    n_marked: dict = field(default_factory=dict)
    solver_cap_hit: list = field(default_factory=list)

    def final_steps(self):
        """The last (solver-converged) step of every level."""
        return [s for s in self.steps
                if s.k == self.k_final.get(s.level)]

    def rows(self):
        return [(s.level, s.k, s.n_elements, s.n_dofs, s.eta, s.increment,
                 s.cum_dofs, s.cum_cost, s.wall_s) for s in self.steps]


def doerfler_mark(eta_sq, theta):
    """Minimal-cardinality Dörfler set: shortest descending-η prefix whose
    mass reaches theta * total; ties broken by ascending element id."""
    eta_sq = np.asarray(eta_sq, dtype=float)
    if eta_sq.size == 0:
        raise AfemError("empty indicator field")
    total = eta_sq.sum()
    if total <= 0:
        return np.empty(0, dtype=np.int64)
    order = np.argsort(-eta_sq, kind="stable")
    csum = np.cumsum(eta_sq[order])
    n = int(np.searchsorted(csum, theta * total - 1e-14 * total) + 1)
    n = min(n, len(eta_sq))
    return np.sort(order[:n])


class _TrivialSession:
    """Stands in when the space has no dofs (e.g. coarse meshes at p = 1)."""

    def __init__(self, n):
        self.x = np.zeros(n)

    def step(self):
        return self.x


def make_session(name, A, b, x0, ws):
    """Stateful one-step-at-a-time solver session for the adaptive loop."""
    if A.shape[0] == 0:
        return _TrivialSession(0)
    if name == "MG":
        return FixedPointSession(A, b, x0, precond.make_handle(ws, "MG"))
    if name == "GPCG+MG":
        return GpcgSession(A, b, x0, precond.make_handle(ws, "MG"))
    if name == "PCG+AS":
        return PcgSession(A, b, x0, precond.make_handle(ws, "AS"))
    if name == "PCG+sMG":
        return PcgSession(A, b, x0, precond.make_handle(ws, "SMG"))
    if name == "PCG+BPX":
        return PcgSession(A, b, x0, precond.make_handle(ws, "BPX"))
    if name == "PCG+MG":
        return PcgSession(A, b, x0, precond.make_handle(ws, "MG"))
    if name == "PCG+nsMG":
        return PcgSession(A, b, x0, precond.make_handle(ws, "NSMG"))
    raise AfemError("unknown solver %r" % (name,))


def adaptive_loop(problem, config):
    """Run the adaptive algorithm on a problem (see problems.Problem).

    Returns (AfemLog, MeshHierarchy, final FeSpace, final coefficients).
    """
    from .mesh import MeshHierarchy

    hierarchy = MeshHierarchy(problem.initial_level())
    K = problem.diffusion(hierarchy.levels[0])
    f = problem.load
    log = AfemLog()
    cum_dofs = 0
    cum_cost = 0
    x = None
    space = None
    level = 0
    while True:
        prev_space = space
        space = fespace.build_space(hierarchy.top, config.p)
        A = assembly.assemble_stiffness(space, K)
        b = assembly.assemble_load(space, f)
        ws = precond.setup(hierarchy, space, A, K)
        if x is None or prev_space is None:
            x0 = np.zeros(space.n_dofs)
        else:
            x0 = fespace.prolong_solution(prev_space, space, x,
                                          hierarchy.infos[-1].parent)
        session = make_session(config.solver, A, b, x0, ws)
        x_star = krylov.direct_solve(A, b) if (config.with_exact
                                               and space.n_dofs) else None
        eta_star = (estimator.indicators(space, K, f, x_star).total
                    if x_star is not None else None)

        x_prev = x0
        ind = None
        k = 0
        while True:
            k += 1
            t0 = time.perf_counter()
            x = session.step().copy()
            if space.n_dofs:
                inc = assembly.energy_norm(A, x - x_prev)
            else:
                inc = 0.0
            ind = estimator.indicators(space, K, f, x)
            wall = time.perf_counter() - t0
            cum_dofs += space.n_dofs
            cum_cost += hierarchy.top.n_triangles
            quasi = None
            if x_star is not None:
                quasi = assembly.energy_norm(A, x_star - x) + eta_star
            log.steps.append(AfemStep(
                level=level, k=k, n_elements=hierarchy.top.n_triangles,
                n_dofs=space.n_dofs, eta=ind.total, increment=inc,
                cum_dofs=cum_dofs, cum_cost=cum_cost, wall_s=wall,
                quasi_error=quasi))
            x_prev = x
            if inc <= config.lambda_stop * ind.total:
                break
            if k >= config.solver_cap:
                log.solver_cap_hit.append(level)
                break
        log.k_final[level] = k

        done = False
        if config.max_levels is not None and level >= config.max_levels:
            done = True
        if config.max_dofs is not None and space.n_dofs >= config.max_dofs:
            done = True
        if (config.max_cum_dofs is not None
                and cum_dofs >= config.max_cum_dofs):
            done = True
        if ind.total_sq <= 0:
            done = True               # solved exactly (e.g. f = 0)
        if done:
            return log, hierarchy, space, x

        marked = doerfler_mark(ind.eta_sq, config.theta)
        log.n_marked[level] = len(marked)
        # marked elements are quartered (all three edges bisected), which
        # reproduces the reference mesh cardinalities
        hierarchy.refine(marked, n_bisections=3)
        level += 1


def rate_fit(xs, ys, use_last_half=True):
    """Least-squares slope of log y against log x.

    Uses the last half of the points (at least two); raises
    InsufficientData for fewer than 5 samples.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if len(xs) < 5:
        raise InsufficientData("need at least 5 points, got %d" % len(xs))
    if use_last_half:
        start = len(xs) // 2
        xs, ys = xs[start:], ys[start:]
    mask = (xs > 0) & (ys > 0)
    return float(np.polyfit(np.log(xs[mask]), np.log(ys[mask]), 1)[0])
