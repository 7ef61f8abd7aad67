"""Degree-p Lagrange spaces with homogeneous Dirichlet conditions, dof maps,
patch-local dof lists, and inter-level transfer operators.

Global node layout: one node per vertex, then ``p - 1`` nodes per edge
(ordered from the lower to the higher vertex id), then the interior lattice
nodes per triangle.  Nodes on the domain boundary are constrained; the free
nodes carry the dof numbering in layout order (vertices, edges, cells), which
makes assembled matrices reproducible.
"""

import numpy as np
import scipy.sparse as sp

from .reference import reference_triangle, n_local_nodes, MAX_DEGREE


class FeSpaceError(Exception):
    pass


class FeSpace:
    """Lagrange space of degree p on one mesh level (zero trace on the
    domain boundary)."""

    def __init__(self, level, p):
        if not 1 <= p <= MAX_DEGREE:
            raise FeSpaceError("unsupported polynomial degree %r" % (p,))
        self.level = level
        self.p = p
        self.ref = reference_triangle(p)
        et = level.edge_table
        nv, ne, nt = level.n_vertices, et.n_edges, level.n_triangles
        n_edge = p - 1
        n_cell = (p - 1) * (p - 2) // 2
        self.n_nodes = nv + n_edge * ne + n_cell * nt
        self._edge_base = nv
        self._cell_base = nv + n_edge * ne

        # element -> global node table, local ordering matching the reference
        tris = level.triangles
        cols = [tris[:, 0], tris[:, 1], tris[:, 2]]
        for k in range(3):
            eidx = et.tri_edges[:, k]
            forward = tris[:, k] == et.edges[eidx, 0]
            base = self._edge_base + eidx * n_edge
            for j in range(n_edge):
                cols.append(base + np.where(forward, j, n_edge - 1 - j))
        if n_cell:
            base = self._cell_base + np.arange(nt) * n_cell
            for j in range(n_cell):
                cols.append(base + j)
        self.elem_nodes = np.column_stack(cols) if cols else np.empty((nt, 0))

        # node coordinates and boundary mask
        coords = np.empty((self.n_nodes, 2))
        on_bnd = np.zeros(self.n_nodes, dtype=bool)
        coords[:nv] = level.coords
        on_bnd[:nv] = level.vertex_on_boundary
        if n_edge:
            a = level.coords[et.edges[:, 0]]
            b = level.coords[et.edges[:, 1]]
            idx = self._edge_base + np.arange(ne)[:, None] * n_edge + np.arange(n_edge)
            ts = (np.arange(1, p) / p)[None, :, None]
            coords[idx.ravel()] = ((1 - ts) * a[:, None, :] + ts * b[:, None, :]
                                   ).reshape(-1, 2)
            on_bnd[idx.ravel()] = np.repeat(et.boundary_edge, n_edge)
        if n_cell:
            interior = self.ref.nodes[3 + 3 * n_edge:]
            v0 = level.coords[tris[:, 0]]
            d1 = level.coords[tris[:, 1]] - v0
            d2 = level.coords[tris[:, 2]] - v0
            xy = (v0[:, None, :] + interior[None, :, 0:1] * d1[:, None, :]
                  + interior[None, :, 1:2] * d2[:, None, :])
            coords[self._cell_base:] = xy.reshape(-1, 2)
        self.node_coords = coords
        self.node_on_boundary = on_bnd

        self.dof_of_node = np.full(self.n_nodes, -1, dtype=np.int64)
        free = np.flatnonzero(~on_bnd)
        self.dof_of_node[free] = np.arange(len(free))
        self.free_nodes = free
        self.n_dofs = len(free)
        self.elem_dofs = self.dof_of_node[self.elem_nodes]

        self._jac = None
        self._vertex_edges = None

    @property
    def n_local(self):
        return n_local_nodes(self.p)

    def jacobians(self):
        """Per-element affine maps: (J, detJ, invJT) with x = v0 + J @ (xi, eta)."""
        if self._jac is None:
            lv = self.level
            v0 = lv.coords[lv.triangles[:, 0]]
            J = np.empty((lv.n_triangles, 2, 2))
            J[:, :, 0] = lv.coords[lv.triangles[:, 1]] - v0
            J[:, :, 1] = lv.coords[lv.triangles[:, 2]] - v0
            det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
            inv = np.empty_like(J)
            inv[:, 0, 0] = J[:, 1, 1]
            inv[:, 0, 1] = -J[:, 1, 0]
            inv[:, 1, 0] = -J[:, 0, 1]
            inv[:, 1, 1] = J[:, 0, 0]
            invJT = inv / det[:, None, None]
            self._jac = (J, det, invJT)
        return self._jac

    def expand(self, coeffs):
        """Free-dof vector -> all-node vector with zeros on the boundary."""
        full = np.zeros(self.n_nodes)
        full[self.free_nodes] = coeffs
        return full

    def restrict(self, node_values):
        return np.asarray(node_values)[self.free_nodes]

    def vertex_edges(self, z):
        """Edge ids incident to vertex z."""
        if self._vertex_edges is None:
            et = self.level.edge_table
            lists = [[] for _ in range(self.level.n_vertices)]
            for e, (a, b) in enumerate(et.edges):
                lists[a].append(e)
                lists[b].append(e)
            self._vertex_edges = lists
        return self._vertex_edges[z]

    def edge_node_ids(self, e):
        n_edge = self.p - 1
        return self._edge_base + e * n_edge + np.arange(n_edge)

    def cell_node_ids(self, t):
        n_cell = (self.p - 1) * (self.p - 2) // 2
        return self._cell_base + t * n_cell + np.arange(n_cell)


def build_space(level, p):
    """Degree-p Lagrange space on `level` with boundary dofs removed."""
    return FeSpace(level, p)


def hat_transfer(hierarchy, l):
    """Interpolation of level-(l-1) hats into level-l hats.

    Sparse (nv_l, nv_{l-1}) over all vertex ids: retained vertices keep their
    value, each new midpoint picks up 1/2 from both edge endpoints.
    """
    coarse = hierarchy.levels[l - 1]
    fine = hierarchy.levels[l]
    triples = hierarchy.new_vertex_triples(l)
    rows = np.concatenate([np.arange(coarse.n_vertices),
                           triples[:, 0], triples[:, 0]])
    cols = np.concatenate([np.arange(coarse.n_vertices),
                           triples[:, 1], triples[:, 2]])
    vals = np.concatenate([np.ones(coarse.n_vertices),
                           np.full(2 * len(triples), 0.5)])
    return sp.csr_matrix((vals, (rows, cols)),
                         shape=(fine.n_vertices, coarse.n_vertices))


def hat_embedding(space):
    """Interpolation of finest-level hats into the degree-p space.

    Sparse (n_dofs, n_vertices); columns of boundary vertices are empty
    (their hats are not members of the zero-trace space).
    """
    p = space.p
    lv = space.level
    et = lv.edge_table
    rows, cols, vals = [], [], []
    interior = ~lv.vertex_on_boundary
    for z in np.flatnonzero(interior):
        rows.append(space.dof_of_node[z])
        cols.append(z)
        vals.append(1.0)
    if p > 1:
        for e in np.flatnonzero(~et.boundary_edge):
            a, b = et.edges[e]
            for j, nid in enumerate(space.edge_node_ids(e)):
                t = (j + 1) / p
                for v, w in ((a, 1 - t), (b, t)):
                    if interior[v]:
                        rows.append(space.dof_of_node[nid])
                        cols.append(v)
                        vals.append(w)
    if p > 2:
        interior_ref = space.ref.nodes[3 + 3 * (p - 1):]
        bary = np.column_stack([1 - interior_ref.sum(axis=1),
                                interior_ref[:, 0], interior_ref[:, 1]])
        for t in range(lv.n_triangles):
            tri = lv.triangles[t]
            for j, nid in enumerate(space.cell_node_ids(t)):
                for k in range(3):
                    if interior[tri[k]]:
                        rows.append(space.dof_of_node[nid])
                        cols.append(tri[k])
                        vals.append(bary[j, k])
    return sp.csr_matrix((vals, (rows, cols)),
                         shape=(space.n_dofs, lv.n_vertices))


def embed_selection(space, hierarchy, level, vertex_ids):
    """Columns of the selected level-`level` hats in the finest degree-p
    free-dof basis (composition of two-level hat transfers)."""
    vertex_ids = np.asarray(vertex_ids, dtype=np.int64)
    if vertex_ids.size and vertex_ids.max() >= hierarchy.levels[level].n_vertices:
        raise FeSpaceError("vertex ids outside level %d" % level)
    M = hat_embedding(space)
    for l in range(hierarchy.n_levels - 1, level, -1):
        M = M @ hat_transfer(hierarchy, l)
    return sp.csr_matrix(M[:, vertex_ids])


def dof_selection(space, dof_ids):
    """0/1 selection matrix picking the given finest-level dofs."""
    dof_ids = np.asarray(dof_ids, dtype=np.int64)
    if dof_ids.size and (dof_ids.min() < 0 or dof_ids.max() >= space.n_dofs):
        raise FeSpaceError("invalid dof ids")
    return sp.csr_matrix(
        (np.ones(len(dof_ids)), (dof_ids, np.arange(len(dof_ids)))),
        shape=(space.n_dofs, len(dof_ids)),
    )


def patch_interior_dofs(space, z):
    """Dofs of the local space on the one-ring patch of vertex z: nodes
    strictly inside the open patch and away from the domain boundary."""
    lv = space.level
    if not 0 <= z < lv.n_vertices:
        raise FeSpaceError("unknown vertex %d" % z)
    dofs = []
    if not lv.vertex_on_boundary[z]:
        dofs.append(space.dof_of_node[z])
    if space.p > 1:
        et = lv.edge_table
        for e in sorted(space.vertex_edges(z)):
            if not et.boundary_edge[e]:
                dofs.extend(space.dof_of_node[space.edge_node_ids(e)])
    if space.p > 2:
        for t in lv.vertex_triangles()[z]:
            dofs.extend(space.dof_of_node[space.cell_node_ids(t)])
    return np.array(dofs, dtype=np.int64)


def prolong_solution(coarse_space, fine_space, coeffs, parent):
    """Nodal interpolation of a coarse function onto the refined mesh.

    `parent` maps each fine triangle to its coarse parent (RefineInfo.parent).
    Exact because the spaces are nested.
    """
    if coarse_space.p != fine_space.p:
        raise FeSpaceError("degree mismatch in prolongation")
    coarse_lv = coarse_space.level
    full = coarse_space.expand(coeffs)
    ref = coarse_space.ref

    fine_pts = fine_space.node_coords[fine_space.elem_nodes]   # (nt, nloc, 2)
    v0 = coarse_lv.coords[coarse_lv.triangles[parent, 0]]
    _, _, invJT = coarse_space.jacobians()
    Binv = np.swapaxes(invJT[parent], 1, 2)                    # inv(J) per parent
    local = np.einsum("tab,tnb->tna", Binv, fine_pts - v0[:, None, :])
    nt, nloc = fine_space.elem_nodes.shape
    basis = ref.eval(local.reshape(-1, 2)).reshape(nt, nloc, -1)
    coarse_loc = full[coarse_space.elem_nodes[parent]]         # (nt, nloc)
    vals = np.einsum("tnk,tk->tn", basis, coarse_loc)
    out = np.zeros(fine_space.n_nodes)
    out[fine_space.elem_nodes.ravel()] = vals.ravel()
    return out[fine_space.free_nodes]
