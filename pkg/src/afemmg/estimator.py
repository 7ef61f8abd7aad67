"""Standard residual a posteriori error indicators with elementwise volume
term and normal-flux jumps across interior edges.

Per element: eta_T^2 = h_T^2 ||f + div(K grad u)||_T^2
                     + h_T ||[K grad u] . n||_{dT cap Omega}^2
with h_T = |T|^(1/2).  Each interior edge integral is computed once and added
to both adjacent elements, each weighted by its own h_T; boundary edges do
not contribute.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .assembly import DimensionMismatch
from .reference import reference_triangle, triangle_rule, edge_rule


@dataclass
class IndicatorField:
    """Squared refinement indicators per element."""

    eta_sq: np.ndarray

    @property
    def total_sq(self):
        return float(self.eta_sq.sum())

    @property
    def total(self):
        return float(np.sqrt(self.eta_sq.sum()))


@lru_cache(maxsize=None)
def _volume_tables(p, qdeg):
    ref = reference_triangle(p)
    pts, w = triangle_rule(qdeg)
    return pts, w, ref.grad(pts), ref.hess(pts)


def indicators(space, K, f, u, qdeg=None):
    """Residual indicators for the coefficient vector u on the given space.

    `f` is a scalar constant or a callable on (n, 2) point arrays.
    """
    if len(u) != space.n_dofs:
        raise DimensionMismatch("coefficients sized %d, space has %d dofs"
                                % (len(u), space.n_dofs))
    p = space.p
    lv = space.level
    nt = lv.n_triangles
    full = space.expand(u)
    coeffs = full[space.elem_nodes]                        # (nt, nloc)
    J, det, invJT = space.jacobians()
    area = lv.areas()
    h = np.sqrt(area)

    # volume term
    if qdeg is None:
        qdeg = 2 * p + 2
    ref_pts, w, gradhat, hesshat = _volume_tables(p, qdeg)
    v0 = lv.coords[lv.triangles[:, 0]]
    pts = v0[:, None, :] + np.einsum("tab,qb->tqa", J, ref_pts)
    flat = pts.reshape(-1, 2)
    if callable(f):
        fq = np.asarray(f(flat), dtype=float).reshape(nt, len(w))
    else:
        fq = np.full((nt, len(w)), float(f))
    resid = fq.copy()
    if p >= 2:
        # K : D^2 u with D^2 transformed by invJT on both sides
        Href = np.einsum("qlh,tl->tqh", hesshat, coeffs)   # (nt, nq, 3)
        B = invJT
        # physical Hessian entries from reference (dxx, dxy, dyy)
        Hxx = (B[:, None, 0, 0]**2 * Href[:, :, 0]
               + 2 * B[:, None, 0, 0] * B[:, None, 0, 1] * Href[:, :, 1]
               + B[:, None, 0, 1]**2 * Href[:, :, 2])
        Hyy = (B[:, None, 1, 0]**2 * Href[:, :, 0]
               + 2 * B[:, None, 1, 0] * B[:, None, 1, 1] * Href[:, :, 1]
               + B[:, None, 1, 1]**2 * Href[:, :, 2])
        Hxy = (B[:, None, 0, 0] * B[:, None, 1, 0] * Href[:, :, 0]
               + (B[:, None, 0, 0] * B[:, None, 1, 1]
                  + B[:, None, 0, 1] * B[:, None, 1, 0]) * Href[:, :, 1]
               + B[:, None, 0, 1] * B[:, None, 1, 1] * Href[:, :, 2])
        Kc = K.per_element(lv)
        if Kc is not None:
            resid += (Kc[:, None, 0, 0] * Hxx + 2 * Kc[:, None, 0, 1] * Hxy
                      + Kc[:, None, 1, 1] * Hyy)
        else:
            Kq = K.at(flat).reshape(nt, len(w), 2, 2)
            resid += (Kq[:, :, 0, 0] * Hxx + 2 * Kq[:, :, 0, 1] * Hxy
                      + Kq[:, :, 1, 1] * Hyy)
    if not K.is_piecewise_constant and K.div is not None:
        G = np.einsum("qld,tl->tqd", gradhat, coeffs)
        Gphys = np.einsum("tab,tqb->tqa", invJT, G)
        divK = K.div_at(flat).reshape(nt, len(w), 2)
        resid += np.einsum("tqd,tqd->tq", divK, Gphys)
    vol = np.einsum("tq,q->t", resid ** 2, w) * det
    eta_sq = area * vol                                    # h_T^2 * ||.||^2

    # jump term over interior edges
    et = lv.edge_table
    interior = np.flatnonzero(~et.boundary_edge)
    if len(interior):
        eq, ew = edge_rule(2 * p)
        a = lv.coords[et.edges[interior, 0]]
        b = lv.coords[et.edges[interior, 1]]
        tangent = b - a
        elen = np.sqrt((tangent ** 2).sum(axis=1))
        normal = np.column_stack([tangent[:, 1], -tangent[:, 0]]) / elen[:, None]
        pts_e = a[:, None, :] + eq[None, :, None] * tangent[:, None, :]
        flux = []
        for side in range(2):
            tid = et.edge_tris[interior, side]
            v0s = lv.coords[lv.triangles[tid, 0]]
            Binv = np.swapaxes(invJT[tid], 1, 2)
            local = np.einsum("eab,eqb->eqa", Binv, pts_e - v0s[:, None, :])
            nE, nq = local.shape[:2]
            ghat = space.ref.grad(local.reshape(-1, 2)).reshape(nE, nq, -1, 2)
            G = np.einsum("eqld,el->eqd", ghat, coeffs[tid])
            Gphys = np.einsum("eab,eqb->eqa", invJT[tid], G)
            if K.is_piecewise_constant:
                Ke = K.per_element(lv)[tid]
                KG = np.einsum("eab,eqb->eqa", Ke, Gphys)
            else:
                Kq = K.at(pts_e.reshape(-1, 2)).reshape(nE, nq, 2, 2)
                KG = np.einsum("eqab,eqb->eqa", Kq, Gphys)
            flux.append(np.einsum("eqa,ea->eq", KG, normal))
        jump_sq = np.einsum("eq,q->e", (flux[0] - flux[1]) ** 2, ew) * elen
        for side in range(2):
            tid = et.edge_tris[interior, side]
            np.add.at(eta_sq, tid, h[tid] * jump_sq)
    return IndicatorField(eta_sq=eta_sq)
