"""Quadrature-based assembly of the diffusion bilinear form: sparse Galerkin
matrices, load vectors, lowest-order level diagonals, and dense patch
matrices with their factorizations.
"""

from functools import lru_cache

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .reference import reference_triangle, triangle_rule

_CHUNK = 4096


class AssemblyError(Exception):
    pass


class DimensionMismatch(AssemblyError):
    pass


class NonSPDError(AssemblyError):
    pass


class FactorizationFailure(AssemblyError):
    pass


class DiffusionField:
    """Symmetric, uniformly positive definite diffusion coefficient.

    Two flavors: piecewise constant on the initial mesh (one 2x2 matrix per
    level-0 element, looked up through `ancestor0`), or a smooth field given
    by callables ``tensor(pts) -> (n, 2, 2)`` and ``div(pts) -> (n, 2)``
    (rows of the divergence, supplied by the user; no automatic
    differentiation).
    """

    def __init__(self, t0_values=None, tensor=None, div=None, degree_hint=0,
                 name="K"):
        if (t0_values is None) == (tensor is None):
            raise AssemblyError("provide exactly one of t0_values / tensor")
        self.t0_values = None if t0_values is None else np.asarray(t0_values, float)
        self.tensor = tensor
        self.div = div
        self.degree_hint = degree_hint
        self.name = name

    @classmethod
    def identity(cls):
        return cls(t0_values=np.eye(2)[None, :, :], name="identity")

    @classmethod
    def scalar_per_t0(cls, values, name="piecewise"):
        values = np.asarray(values, dtype=float)
        return cls(t0_values=values[:, None, None] * np.eye(2), name=name)

    @classmethod
    def checkerboard(cls, level0, low=1.0, high=100.0):
        """2x2 checkerboard on the unit square: `high` on the two diagonal
        quadrants, `low` on the others; constant per initial element."""
        cent = level0.coords[level0.triangles].mean(axis=1)
        diag = (cent[:, 0] < 0.5) == (cent[:, 1] < 0.5)
        vals = np.where(diag, high, low)
        return cls.scalar_per_t0(vals, name="checkerboard")

    @property
    def is_piecewise_constant(self):
        return self.t0_values is not None

    def per_element(self, level):
        """(nt, 2, 2) constant matrices per element, or None if not
        piecewise constant."""
        if not self.is_piecewise_constant:
            return None
        if self.t0_values.shape[0] == 1:
            return np.broadcast_to(self.t0_values,
                                   (level.n_triangles, 2, 2))
        return self.t0_values[level.ancestor0]

    def at(self, pts, level=None, tri_ids=None):
        """(n, 2, 2) values at physical points (tri_ids give the elements
        containing the points, needed for the piecewise-constant lookup)."""
        if self.is_piecewise_constant:
            anc = level.ancestor0[tri_ids]
            if self.t0_values.shape[0] == 1:
                return np.broadcast_to(self.t0_values, (len(pts), 2, 2))
            return self.t0_values[anc]
        return np.asarray(self.tensor(pts), dtype=float)

    def div_at(self, pts, level=None, tri_ids=None):
        if self.is_piecewise_constant or self.div is None:
            return np.zeros((len(pts), 2))
        return np.asarray(self.div(pts), dtype=float)


@lru_cache(maxsize=None)
def _ref_tables(p, qdeg):
    ref = reference_triangle(p)
    pts, w = triangle_rule(qdeg)
    return pts, w, ref.eval(pts), ref.grad(pts)


def _check_spd_2x2(K, where):
    det = K[..., 0, 0] * K[..., 1, 1] - K[..., 0, 1] * K[..., 1, 0]
    tr = K[..., 0, 0] + K[..., 1, 1]
    if (det <= 0).any() or (tr <= 0).any():
        raise NonSPDError("diffusion coefficient not SPD at %s" % where)


def stiffness_quad_degree(p, K):
    return max(2 * p, 2 * p - 2 + (K.degree_hint if not K.is_piecewise_constant
                                   else 0))


def element_stiffness_matrices(space, K):
    """(nt, nloc, nloc) element contributions to the stiffness matrix."""
    p = space.p
    qdeg = stiffness_quad_degree(p, K)
    ref_pts, w, _, grads = _ref_tables(p, qdeg)
    J, det, invJT = space.jacobians()
    lv = space.level
    nt = lv.n_triangles
    nl = space.n_local
    Kconst = K.per_element(lv)
    out = np.empty((nt, nl, nl))
    for s in range(0, nt, _CHUNK):
        e = min(s + _CHUNK, nt)
        # physical gradients: (chunk, nq, nloc, 2)
        G = np.einsum("tab,qlb->tqla", invJT[s:e], grads)
        if Kconst is not None:
            Kc = Kconst[s:e]
            _check_spd_2x2(Kc, "elements %d:%d" % (s, e))
            KG = np.einsum("tab,tqlb->tqla", Kc, G)
        else:
            v0 = lv.coords[lv.triangles[s:e, 0]]
            pts = v0[:, None, :] + np.einsum("tab,qb->tqa", J[s:e], ref_pts)
            Kq = K.at(pts.reshape(-1, 2)).reshape(e - s, len(w), 2, 2)
            _check_spd_2x2(Kq, "quadrature points")
            KG = np.einsum("tqab,tqlb->tqla", Kq, G)
        out[s:e] = np.einsum("tqla,tqma,q,t->tlm", KG, G, w, det[s:e])
    return out


def assemble_stiffness(space, K, element_matrices=None):
    """Sparse SPD Galerkin matrix of the diffusion form on the free dofs."""
    if element_matrices is None:
        element_matrices = element_stiffness_matrices(space, K)
    ed = space.elem_dofs
    nl = space.n_local
    rows = np.repeat(ed, nl, axis=1)
    cols = np.tile(ed, (1, nl))
    vals = element_matrices.reshape(len(ed), -1)
    mask = (rows >= 0) & (cols >= 0)
    A = sp.csr_matrix(
        (vals[mask], (rows[mask], cols[mask])),
        shape=(space.n_dofs, space.n_dofs),
    )
    return (A + A.T) * 0.5


def assemble_load(space, f, qdeg=None):
    """Load vector b_j = (f, phi_j) on the free dofs; `f` is a callable on
    (n, 2) arrays or a scalar constant."""
    p = space.p
    if qdeg is None:
        qdeg = 2 * p + 2
    ref_pts, w, vals, _ = _ref_tables(p, qdeg)
    J, det, _ = space.jacobians()
    lv = space.level
    v0 = lv.coords[lv.triangles[:, 0]]
    pts = v0[:, None, :] + np.einsum("tab,qb->tqa", J, ref_pts)
    if callable(f):
        fq = np.asarray(f(pts.reshape(-1, 2)), dtype=float).reshape(
            lv.n_triangles, len(w))
    else:
        fq = np.full((lv.n_triangles, len(w)), float(f))
    be = np.einsum("tq,ql,q,t->tl", fq, vals, w, det)
    b = np.zeros(space.n_dofs)
    ed = space.elem_dofs
    mask = ed >= 0
    np.add.at(b, ed[mask], be[mask])
    return b


def p1_element_matrices(level, K):
    """Closed-form lowest-order element matrices (hat-gradient outer
    products); exact for elementwise-constant K, quadrature otherwise."""
    tris = level.triangles
    v = level.coords[tris]
    area = level.areas()
    # gradients of the three barycentric hats
    g = np.empty((level.n_triangles, 3, 2))
    for k in range(3):
        a = v[:, (k + 1) % 3]
        b = v[:, (k + 2) % 3]
        g[:, k, 0] = a[:, 1] - b[:, 1]
        g[:, k, 1] = b[:, 0] - a[:, 0]
    g /= (2.0 * area)[:, None, None]
    Kconst = K.per_element(level)
    if Kconst is None:
        cent = v.mean(axis=1)
        Kconst = K.at(cent)
    Kg = np.einsum("tab,tlb->tla", Kconst, g)
    return np.einsum("tla,tma,t->tlm", Kg, g, area)


def assemble_p1_all_vertices(level, K):
    """Lowest-order stiffness over all vertices (no boundary conditions);
    used for the per-level smoother data of the multigrid hierarchy."""
    Ae = p1_element_matrices(level, K)
    tris = level.triangles
    rows = np.repeat(tris, 3, axis=1)
    cols = np.tile(tris, (1, 3))
    A = sp.csr_matrix(
        (Ae.ravel(), (rows.ravel(), cols.ravel())),
        shape=(level.n_vertices, level.n_vertices),
    )
    return (A + A.T) * 0.5


def assemble_level_diagonal(hierarchy, l, vertex_ids, K):
    """Diagonal entries a(phi_z, phi_z) of the level-l lowest-order form at
    the given vertices, accumulated patchwise (cost O(#patch) per vertex)."""
    level = hierarchy.levels[l]
    vertex_ids = np.asarray(vertex_ids, dtype=np.int64)
    vtris = level.vertex_triangles()
    tri_ids = sorted({t for z in vertex_ids for t in vtris[z]})
    tri_ids = np.array(tri_ids, dtype=np.int64)
    sub = level.triangles[tri_ids]
    # element matrices only for the touched triangles
    Ae = p1_element_matrices(level, K)[tri_ids] if len(tri_ids) else None
    diag = np.zeros(level.n_vertices)
    if Ae is not None:
        for k in range(3):
            np.add.at(diag, sub[:, k], Ae[:, k, k])
    out = diag[vertex_ids]
    if (out <= 0).any():
        raise NonSPDError("non-positive level diagonal")
    return out


def assemble_patch_matrix(space, z, K, element_matrices=None, dofs=None):
    """Dense SPD matrix of the bilinear form on the patch-local space around
    vertex z, with its Cholesky factor.

    Returns (dofs, matrix, cholesky_factor); dofs may be empty for boundary
    vertices at p = 1.
    """
    from .fespace import patch_interior_dofs

    if dofs is None:
        dofs = patch_interior_dofs(space, z)
    if len(dofs) == 0:
        return dofs, np.zeros((0, 0)), np.zeros((0, 0))
    if element_matrices is None:
        element_matrices = element_stiffness_matrices(space, K)
    pos = {d: i for i, d in enumerate(dofs)}
    n = len(dofs)
    M = np.zeros((n, n))
    for t in space.level.vertex_triangles()[z]:
        ed = space.elem_dofs[t]
        loc = [(i, pos[d]) for i, d in enumerate(ed) if d in pos]
        for i, gi in loc:
            for j, gj in loc:
                M[gi, gj] += element_matrices[t, i, j]
    M = 0.5 * (M + M.T)
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise FactorizationFailure("patch matrix at vertex %d not SPD" % z) from exc
    return dofs, M, L


def energy_norm(A, x):
    """sqrt(x^T A x); raises on dimension mismatch or a clearly negative
    radicand (non-SPD signal)."""
    x = np.asarray(x, dtype=float)
    if A.shape[1] != x.shape[0]:
        raise DimensionMismatch("matrix %s vs vector %s" % (A.shape, x.shape))
    rad = float(x @ (A @ x))
    if rad < 0:
        scale = float(abs(A).max() if sp.issparse(A) else np.abs(A).max())
        if rad < -1e-14 * max(1.0, scale * float(x @ x)):
            raise NonSPDError("negative energy radicand %g" % rad)
        rad = 0.0
    return np.sqrt(rad)


def write_matrix_market(A, path):
    """Dump a symmetric sparse matrix in Matrix Market coordinate format
    (lower triangle, 1-based indices)."""
    A = sp.coo_matrix(A)
    keep = A.row >= A.col
    with open(path, "w") as fh:
        fh.write("%%MatrixMarket matrix coordinate real symmetric\n")
        fh.write("%d %d %d\n" % (A.shape[0], A.shape[1], keep.sum()))
        for i, j, v in zip(A.row[keep], A.col[keep], A.data[keep]):
            fh.write("%d %d %.16e\n" % (i + 1, j + 1, v))
