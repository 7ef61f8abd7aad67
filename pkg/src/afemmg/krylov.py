"""Conjugate-gradient solvers (plain, preconditioned, and the generalized
variant tolerating non-linear/non-symmetric preconditioners), a sparse direct
oracle, and Lanczos extreme-eigenvalue estimation in the energy inner
product.

Stopping conventions follow the source algorithms verbatim and intentionally
differ: `cg` stops on the squared residual norm ``|r|_2^2 < tol``, `gpcg` on
the plain norm ``|r|_2 < tol``, and `pcg` on the preconditioned quantity
``(r, B r)_2 < tol`` so that pcg with the identity preconditioner reduces
bitwise to cg.  Experiment drivers typically pass ``x_star``/``energy_tol``
and stop on the algebraic energy error instead.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

_TINY_ABS = 1e-300
_TINY_REL = 1e-16


class KrylovError(Exception):
    pass


class Breakdown(KrylovError):
    pass


class IterationCapExceeded(KrylovError):
    pass


class FlagViolation(KrylovError):
    pass


class FactorizationFailure(KrylovError):
    pass


@dataclass
class PreconditionerHandle:
    """Uniform apply(r) -> s contract with declared structure flags."""

    apply: Callable[[np.ndarray], np.ndarray]
    is_linear: bool
    is_symmetric: bool
    name: str = "B"

    def __call__(self, r):
        return self.apply(r)


def identity_preconditioner():
    return PreconditionerHandle(lambda r: r.copy(), True, True, name="identity")


@dataclass
class SolveReport:
    """Iteration record of one solver run."""

    n_iter: int = 0
    converged: bool = False
    final_residual: float = np.inf
    final_energy_error: Optional[float] = None
    residual_norms: list = field(default_factory=list)
    energy_errors: list = field(default_factory=list)

    @property
    def contraction_factors(self):
        e = self.energy_errors
        return [e[k + 1] / e[k] for k in range(len(e) - 1) if e[k] > 0]


def _breakdown(value, scale, what):
    if value <= _TINY_ABS or value <= _TINY_REL * scale:
        raise Breakdown("%s = %g too small (scale %g)" % (what, value, scale))


def verify_flags(B, n, rng=None, tol=1e-11, n_probes=2):
    """Probe the declared linearity/symmetry of a preconditioner handle.

    Raises FlagViolation if a declared property fails on random probes or
    if apply(0) != 0.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    z = B(np.zeros(n))
    if np.linalg.norm(z) != 0.0 and np.linalg.norm(z) > 1e-13:
        raise FlagViolation("apply(0) != 0 for %s" % B.name)
    for _ in range(n_probes):
        r1 = rng.standard_normal(n)
        r2 = rng.standard_normal(n)
        if B.is_linear:
            a, b = rng.standard_normal(2)
            lhs = B(a * r1 + b * r2)
            rhs = a * B(r1) + b * B(r2)
            scale = max(np.linalg.norm(lhs), np.linalg.norm(rhs), 1e-30)
            if np.linalg.norm(lhs - rhs) > tol * scale:
                raise FlagViolation("linearity probe failed for %s" % B.name)
        if B.is_symmetric and B.is_linear:
            s1, s2 = B(r1), B(r2)
            lhs = s1 @ r2
            rhs = r1 @ s2
            scale = max(abs(lhs), abs(rhs), 1e-30)
            if abs(lhs - rhs) > tol * scale:
                raise FlagViolation("symmetry probe failed for %s" % B.name)


class _Recorder:
    def __init__(self, A, x_star):
        self.A = A
        self.x_star = x_star
        self.report = SolveReport()

    def log(self, x, res_norm):
        rep = self.report
        rep.residual_norms.append(res_norm)
        rep.final_residual = res_norm
        if self.x_star is not None:
            e = self.x_star - x
            err = float(np.sqrt(max(e @ (self.A @ e), 0.0)))
            rep.energy_errors.append(err)
            rep.final_energy_error = err

    def energy_below(self, tol):
        return (tol is not None and self.report.energy_errors
                and self.report.energy_errors[-1] < tol)


class FixedPointSession:
    """Stationary iteration x <- x + B[b - A x]."""

    def __init__(self, A, b, x0, handle):
        self.A, self.b = A, b
        self.x = np.array(x0, dtype=float, copy=True)
        self.handle = handle

    def step(self):
        r = self.b - self.A @ self.x
        self.x = self.x + self.handle(r)
        return self.x

    def residual_norm(self):
        return float(np.linalg.norm(self.b - self.A @ self.x))


class CgSession:
    """Plain CG; state advances one iteration per step() call."""

    def __init__(self, A, b, x0):
        self.A = A
        self.x = np.array(x0, dtype=float, copy=True)
        self.r = b - A @ self.x
        self.p = self.r.copy()
        self.rho = float(self.r @ self.r)

    def step(self):
        if self.rho == 0.0:
            return self.x          # already at the solution
        Ap = self.A @ self.p
        pap = float(self.p @ Ap)
        _breakdown(pap, self.rho, "|p|_A^2")
        alpha = self.rho / pap
        self.x = self.x + alpha * self.p
        self.r = self.r - alpha * Ap
        rho_new = float(self.r @ self.r)
        beta = rho_new / self.rho
        self.p = self.r + beta * self.p
        self.rho = rho_new
        return self.x

    def residual_norm(self):
        return float(np.sqrt(self.rho))


class PcgSession:
    """Transformed-recurrence PCG with a linear symmetric preconditioner."""

    def __init__(self, A, b, x0, handle):
        self.A = A
        self.handle = handle
        self.x = np.array(x0, dtype=float, copy=True)
        self.r = b - A @ self.x
        self.Br = handle(self.r)
        self.rho = float(self.r @ self.Br)
        self.p = self.Br.copy()

    def step(self):
        if float(self.r @ self.r) == 0.0:
            return self.x          # already at the solution
        Ap = self.A @ self.p
        pap = float(self.p @ Ap)
        _breakdown(pap, abs(self.rho) + _TINY_ABS, "|p|_A^2")
        alpha = self.rho / pap
        self.x = self.x + alpha * self.p
        self.r = self.r - alpha * Ap
        self.Br = self.handle(self.r)
        rho_new = float(self.r @ self.Br)
        beta = rho_new / self.rho
        self.p = self.Br + beta * self.p
        self.rho = rho_new
        return self.x

    def residual_norm(self):
        return float(np.linalg.norm(self.r))

    def preconditioned_norm_sq(self):
        return self.rho


class GpcgSession:
    """Generalized PCG; one preconditioner application per iteration, reused
    in the step size and in both terms of the search-direction update."""

    def __init__(self, A, b, x0, handle):
        self.A = A
        self.handle = handle
        self.x = np.array(x0, dtype=float, copy=True)
        self.r = b - A @ self.x
        self.Br = handle(self.r)
        self.rho = float(self.Br @ self.r)
        self.p = self.Br.copy()

    def step(self):
        if float(self.r @ self.r) == 0.0:
            return self.x          # already at the solution
        if self.rho <= 0:
            raise Breakdown(
                "(B[r], r)_2 = %g <= 0: preconditioner violates the "
                "energy-approximation assumption" % self.rho)
        Ap = self.A @ self.p
        pap = float(self.p @ Ap)
        _breakdown(pap, self.rho, "|p|_A^2")
        alpha = self.rho / pap
        self.x = self.x + alpha * self.p
        r_new = self.r - alpha * Ap
        Br_new = self.handle(r_new)
        rho_new = float(Br_new @ r_new)
        beta = (rho_new - float(Br_new @ self.r)) / self.rho
        self.p = Br_new + beta * self.p
        self.r, self.Br, self.rho = r_new, Br_new, rho_new
        return self.x

    def residual_norm(self):
        return float(np.linalg.norm(self.r))


def _run(session, stop, max_iter, recorder, energy_tol, strict):
    recorder.log(session.x, session.residual_norm())

    def done():
        if energy_tol is not None:
            return recorder.energy_below(energy_tol)
        return stop(session)

    k = 0
    while not done():
        if k >= max_iter:
            if strict:
                raise IterationCapExceeded(
                    "no convergence in %d iterations" % max_iter)
            return session.x, recorder.report
        session.step()
        k += 1
        recorder.report.n_iter = k
        recorder.log(session.x, session.residual_norm())
    recorder.report.converged = True
    return session.x, recorder.report


def cg(A, b, x0=None, tol=0.0, max_iter=500, x_star=None, energy_tol=None,
       strict=True):
    """Plain conjugate gradients; stops on |r|_2^2 < tol (squared test)."""
    x0 = np.zeros(A.shape[0]) if x0 is None else x0
    session = CgSession(A, b, x0)
    recorder = _Recorder(A, x_star)
    return _run(session, lambda s: s.rho < tol, max_iter, recorder,
                energy_tol, strict)


def pcg(A, B, b, x0=None, tol=0.0, max_iter=500, x_star=None,
        energy_tol=None, strict=True, verify=True, rng=None):
    """Preconditioned CG via the transformed recurrences.

    With `verify` the declared linear/symmetric flags are required and
    probed (FlagViolation on failure); pass verify=False to run the failure
    studies with intentionally unsuitable preconditioners.
    """
    if verify:
        if not (B.is_linear and B.is_symmetric):
            raise FlagViolation(
                "pcg requires a preconditioner declared linear and symmetric")
        verify_flags(B, A.shape[0], rng=rng)
    x0 = np.zeros(A.shape[0]) if x0 is None else x0
    session = PcgSession(A, b, x0, B)
    recorder = _Recorder(A, x_star)
    return _run(session, lambda s: s.rho < tol, max_iter, recorder,
                energy_tol, strict)


def gpcg(A, B, b, x0=None, tol=0.0, max_iter=500, x_star=None,
         energy_tol=None, strict=True):
    """Generalized PCG; stops on |r|_2 < tol (unsquared test)."""
    x0 = np.zeros(A.shape[0]) if x0 is None else x0
    session = GpcgSession(A, b, x0, B)
    recorder = _Recorder(A, x_star)
    return _run(session, lambda s: s.residual_norm() < tol, max_iter,
                recorder, energy_tol, strict)


def fixed_point(A, B, b, x0=None, tol=0.0, max_iter=500, x_star=None,
                energy_tol=None, strict=True):
    """Stationary iteration x <- x + B[b - A x]; stops on |r|_2 < tol or on
    the energy error when x_star/energy_tol are given."""
    x0 = np.zeros(A.shape[0]) if x0 is None else x0
    session = FixedPointSession(A, b, x0, B)
    recorder = _Recorder(A, x_star)
    return _run(session, lambda s: s.residual_norm() < tol, max_iter,
                recorder, energy_tol, strict)


def direct_solve(A, b):
    """Sparse factorization solve, the oracle for exact discrete solutions."""
    try:
        lu = spla.splu(sp.csc_matrix(A))
        x = lu.solve(b)
    except RuntimeError as exc:
        raise FactorizationFailure(str(exc)) from exc
    nb = np.linalg.norm(b)
    if nb > 0 and np.linalg.norm(A @ x - b) > 1e-10 * nb:
        raise FactorizationFailure("direct solve residual too large")
    return x


def extreme_eigs(op, A, m=60, rng=None, n_restarts=3):
    """Extreme eigenvalue estimates of an operator self-adjoint in the
    A-inner product (e.g. x -> B(Ax)) by Lanczos with full
    reorthogonalization.

    Returns (lambda_min, lambda_max) Ritz estimates.
    """
    rng = np.random.default_rng(7) if rng is None else rng
    n = A.shape[0]
    m = min(m, n)
    for _ in range(n_restarts):
        v = rng.standard_normal(n)
        nrm2 = float(v @ (A @ v))
        if nrm2 <= _TINY_ABS:
            continue
        v = v / np.sqrt(nrm2)
        V = [v]
        alphas, betas = [], []
        for _j in range(m):
            w = op(V[-1])
            Aw = A @ w
            alpha = float(V[-1] @ Aw)
            alphas.append(alpha)
            w = w - alpha * V[-1]
            if len(V) > 1:
                w = w - betas[-1] * V[-2]
            for _pass in range(2):  # full reorthogonalization, two sweeps
                Aw = A @ w
                coeffs = np.array([vi @ Aw for vi in V])
                for c, vi in zip(coeffs, V):
                    w = w - c * vi
            beta2 = float(w @ (A @ w))
            if beta2 <= max(_TINY_ABS, 1e-28):
                break
            beta = np.sqrt(beta2)
            betas.append(beta)
            V.append(w / beta)
        if alphas:
            from scipy.linalg import eigh_tridiagonal
            if betas:
                ev = eigh_tridiagonal(np.array(alphas),
                                      np.array(betas[:len(alphas) - 1]),
                                      eigvals_only=True)
            else:
                ev = np.array(alphas)
            return float(ev.min()), float(ev.max())
    raise Breakdown("Lanczos failed to build a Krylov space")
