"""Reference triangle: Lagrange lattice nodes, Bernstein-backed nodal basis,
and quadrature rules.

The reference element is the unit triangle {(x, y): x, y >= 0, x + y <= 1}
with vertices (0,0), (1,0), (0,1).  Local node ordering: the 3 vertices,
then p-1 nodes per edge (edge k runs from vertex k to vertex (k+1) % 3),
then the interior lattice nodes in lexicographic order.

Nodal shape functions are represented in the Bernstein basis, whose
Vandermonde matrix at the equispaced lattice stays well conditioned up to
p = 8 (cond ~ 5e2), so nodal values, gradients and Hessians evaluate to
near machine precision.
"""

from functools import lru_cache
from math import factorial

import numpy as np
from scipy.special import roots_jacobi

MAX_DEGREE = 8


def lattice_nodes(p):
    """Equispaced Lagrange nodes on the reference triangle, local ordering."""
    pts = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)]
    for k in range(1, p):
        pts.append((k / p, 0.0))
    for k in range(1, p):
        pts.append((1.0 - k / p, k / p))
    for k in range(1, p):
        pts.append((0.0, 1.0 - k / p))
    for i in range(1, p):
        for j in range(1, p - i):
            pts.append((i / p, j / p))
    return np.array(pts, dtype=float).reshape(-1, 2)


def n_local_nodes(p):
    return (p + 1) * (p + 2) // 2


def _bernstein_exponents(p):
    return [(i, j, p - i - j) for i in range(p + 1) for j in range(p + 1 - i)]


def _bernstein_tables(p, pts):
    """Values, gradients, Hessians of all Bernstein polynomials at pts.

    Barycentric coordinates b = (1-x-y, x, y) with constant gradients
    (-1,-1), (1,0), (0,1); derivatives follow from the product rule.
    """
    x, y = pts[:, 0], pts[:, 1]
    b = np.stack([1.0 - x - y, x, y], axis=1)               # (n, 3)
    grads = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])  # (3, 2)
    n = len(pts)
    exps = _bernstein_exponents(p)
    nb = len(exps)
    # powers b_i^k for k = 0..p
    pw = np.ones((n, 3, p + 1))
    for k in range(1, p + 1):
        pw[:, :, k] = pw[:, :, k - 1] * b
    val = np.empty((n, nb))
    grad = np.zeros((n, nb, 2))
    hess = np.zeros((n, nb, 3))  # (dxx, dxy, dyy)
    for col, (i, j, k) in enumerate(exps):
        c = factorial(p) / (factorial(i) * factorial(j) * factorial(k))
        e = (i, j, k)
        val[:, col] = c * pw[:, 0, i] * pw[:, 1, j] * pw[:, 2, k]
        for a in range(3):
            if e[a] == 0:
                continue
            rest = c * e[a]
            term = np.ones(n)
            for m in range(3):
                term = term * pw[:, m, e[m] - (1 if m == a else 0)]
            grad[:, col, 0] += rest * grads[a, 0] * term
            grad[:, col, 1] += rest * grads[a, 1] * term
            for a2 in range(3):
                e2 = list(e)
                e2[a] -= 1
                if e2[a2] == 0:
                    continue
                rest2 = rest * e2[a2]
                e2[a2] -= 1
                term2 = np.ones(n)
                for m in range(3):
                    term2 = term2 * pw[:, m, e2[m]]
                gx = grads[a, 0] * grads[a2, 0]
                gxy = grads[a, 0] * grads[a2, 1]
                gy = grads[a, 1] * grads[a2, 1]
                hess[:, col, 0] += rest2 * gx * term2
                hess[:, col, 1] += rest2 * gxy * term2
                hess[:, col, 2] += rest2 * gy * term2
    return val, grad, hess


class ReferenceTriangle:
    """Nodal Lagrange basis of degree p on the reference triangle."""

    def __init__(self, p):
        if not 1 <= p <= MAX_DEGREE:
            raise ValueError("unsupported polynomial degree %r" % (p,))
        self.p = p
        self.nodes = lattice_nodes(p)
        V, _, _ = _bernstein_tables(p, self.nodes)
        self._coeff = np.linalg.inv(V)  # Bernstein -> nodal

    def eval(self, pts):
        """Shape (n_pts, n_loc) of nodal basis values."""
        V, _, _ = _bernstein_tables(self.p, np.asarray(pts, dtype=float))
        return V @ self._coeff

    def grad(self, pts):
        """Shape (n_pts, n_loc, 2)."""
        _, G, _ = _bernstein_tables(self.p, np.asarray(pts, dtype=float))
        return np.einsum("nbd,bl->nld", G, self._coeff)

    def hess(self, pts):
        """Shape (n_pts, n_loc, 3) with columns (dxx, dxy, dyy)."""
        _, _, H = _bernstein_tables(self.p, np.asarray(pts, dtype=float))
        return np.einsum("nbd,bl->nld", H, self._coeff)


@lru_cache(maxsize=None)
def reference_triangle(p):
    return ReferenceTriangle(p)


@lru_cache(maxsize=None)
def triangle_rule(degree):
    """Quadrature on the reference triangle exact for total degree `degree`.

    Collapsed tensor rule: Gauss-Legendre in the first coordinate and
    Gauss-Jacobi (weight (1-v)) in the second, mapped through the Duffy
    transform, so polynomial exactness is guaranteed.  Weights sum to 1/2.
    """
    n = max(1, degree // 2 + 1)
    xg, wg = np.polynomial.legendre.leggauss(n)
    xj, wj = roots_jacobi(n, 1.0, 0.0)
    u = 0.5 * (xg + 1.0)
    wu = 0.5 * wg
    v = 0.5 * (xj + 1.0)
    wv = 0.25 * wj
    U, V = np.meshgrid(u, v, indexing="ij")
    pts = np.column_stack([(U * (1.0 - V)).ravel(), V.ravel()])
    w = np.outer(wu, wv).ravel()
    return pts, w


@lru_cache(maxsize=None)
def edge_rule(degree):
    """Gauss-Legendre rule on [0, 1] exact for the given degree."""
    n = max(1, (degree + 2) // 2)
    xg, wg = np.polynomial.legendre.leggauss(n)
    return 0.5 * (xg + 1.0), 0.5 * wg
