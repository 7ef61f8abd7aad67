"""Conforming triangular meshes and newest-vertex-bisection refinement.

Conventions
-----------
Triangles are stored as index triples ``(v0, v1, v2)`` in counterclockwise
order, normalized so that the refinement edge is always ``(v0, v1)`` and the
newest vertex is ``v2``.  Bisecting a triangle ``(a, b, c)`` inserts the
midpoint ``m`` of the edge ``(a, b)`` and produces the children ``(c, a, m)``
and ``(b, c, m)``; the new vertex ``m`` is the newest vertex of both children.

In mesh files the refinement edge is given as a local index ``e`` with the
convention that edge ``e`` connects the vertices at local positions ``e`` and
``(e + 1) % 3``.

Vertex ids are persistent along a refinement hierarchy: refining a mesh only
appends vertices, so the vertices of level ``l`` are a prefix of those of any
finer level.
"""

import io

import numpy as np


class MeshError(Exception):
    """Base class for mesh construction/refinement failures."""


class NonConforming(MeshError):
    """Mesh has hanging nodes or an edge shared by more than two triangles."""


class DegenerateTriangle(MeshError):
    """Triangle with zero or negative signed area."""


class InvalidTag(MeshError):
    """Refinement-edge tags violate the matching condition or are out of range."""


class EdgeTable:
    """Unique edges of a triangulation with triangle adjacency.

    Attributes
    ----------
    edges : (ne, 2) int array, each row sorted ascending
    edge_tris : (ne, 2) int array, adjacent triangle ids, -1 marks "none"
    tri_edges : (nt, 3) int array, edge id of local edge k = (v_k, v_{k+1})
    boundary_edge : (ne,) bool
    """

    def __init__(self, triangles, n_vertices):
        nt = triangles.shape[0]
        pairs = np.stack(
            [triangles, np.roll(triangles, -1, axis=1)], axis=2
        ).reshape(-1, 2)
        pairs_sorted = np.sort(pairs, axis=1)
        keys = pairs_sorted[:, 0].astype(np.int64) * n_vertices + pairs_sorted[:, 1]
        uniq, tri_edges, counts = np.unique(
            keys, return_inverse=True, return_counts=True
        )
        if counts.max(initial=0) > 2:
            raise NonConforming("an edge is shared by more than two triangles")
        ne = uniq.shape[0]
        self.edges = np.column_stack([uniq // n_vertices, uniq % n_vertices]).astype(
            np.int64
        )
        self.tri_edges = tri_edges.reshape(nt, 3)
        self.edge_tris = np.full((ne, 2), -1, dtype=np.int64)
        # deterministic adjacency order: lower triangle id in column 0
        for t in range(nt):
            for k in range(3):
                e = self.tri_edges[t, k]
                if self.edge_tris[e, 0] == -1:
                    self.edge_tris[e, 0] = t
                else:
                    self.edge_tris[e, 1] = t
        self.boundary_edge = self.edge_tris[:, 1] == -1

    @property
    def n_edges(self):
        return self.edges.shape[0]


class MeshLevel:
    """One conforming triangulation of the domain.

    Parameters
    ----------
    coords : (nv, 2) float array
    triangles : (nt, 3) int array, normalized (refinement edge first, CCW)
    vertex_on_boundary : (nv,) bool
    vertex_birth : (nv,) int, level at which each vertex first exists
    generation : (nt,) int, bisection count from the level-0 ancestor
    ancestor0 : (nt,) int, index of the level-0 ancestor triangle
    level_index : int
    """

    def __init__(self, coords, triangles, vertex_on_boundary, vertex_birth,
                 generation, ancestor0, level_index=0):
        self.coords = np.asarray(coords, dtype=float)
        self.triangles = np.asarray(triangles, dtype=np.int64)
        self.vertex_on_boundary = np.asarray(vertex_on_boundary, dtype=bool)
        self.vertex_birth = np.asarray(vertex_birth, dtype=np.int64)
        self.generation = np.asarray(generation, dtype=np.int64)
        self.ancestor0 = np.asarray(ancestor0, dtype=np.int64)
        self.level_index = level_index
        self._edge_table = None
        self._vertex_tris = None

    @property
    def n_vertices(self):
        return self.coords.shape[0]

    @property
    def n_triangles(self):
        return self.triangles.shape[0]

    @property
    def edge_table(self):
        if self._edge_table is None:
            self._edge_table = EdgeTable(self.triangles, self.n_vertices)
        return self._edge_table

    def signed_areas(self):
        p = self.coords[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def areas(self):
        return self.signed_areas()

    def diameters(self):
        p = self.coords[self.triangles]
        e = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]])
        return np.sqrt((e ** 2).sum(axis=2)).max(axis=0)

    def vertex_triangles(self):
        """List of incident triangle ids per vertex."""
        if self._vertex_tris is None:
            lists = [[] for _ in range(self.n_vertices)]
            for t, tri in enumerate(self.triangles):
                for v in tri:
                    lists[v].append(t)
            self._vertex_tris = lists
        return self._vertex_tris

    def interior_vertices(self):
        return np.flatnonzero(~self.vertex_on_boundary)


def init_mesh(coords, triangles, refinement_edges, boundary_flags=None,
              check_admissible=True):
    """Validate an initial triangulation and normalize refinement-edge tags.

    Parameters
    ----------
    coords : (nv, 2) array of vertex coordinates
    triangles : (nt, 3) int array, counterclockwise vertex triples
    refinement_edges : (nt,) int array with local edge tags in {0, 1, 2};
        local edge ``e`` connects vertices ``e`` and ``(e + 1) % 3``
    boundary_flags : optional (nv,) bool; validated against the edge table
    check_admissible : verify the matching condition (every interior edge is
        the refinement edge of both adjacent triangles or of neither)

    Returns
    -------
    MeshLevel

    Raises
    ------
    DegenerateTriangle, NonConforming, InvalidTag
    """
    coords = np.asarray(coords, dtype=float)
    triangles = np.asarray(triangles, dtype=np.int64)
    refinement_edges = np.asarray(refinement_edges, dtype=np.int64)
    if not np.isfinite(coords).all():
        raise MeshError("non-finite vertex coordinates")
    if triangles.min(initial=0) < 0 or triangles.max(initial=-1) >= len(coords):
        raise MeshError("triangle references an unknown vertex")
    if refinement_edges.min(initial=0) < 0 or refinement_edges.max(initial=0) > 2:
        raise InvalidTag("refinement edge tags must lie in {0, 1, 2}")
    if any(len(set(tri)) != 3 for tri in triangles):
        raise DegenerateTriangle("triangle with repeated vertex")

    # rotate each triple so the refinement edge is (v0, v1)
    rolled = np.empty_like(triangles)
    for t in range(len(triangles)):
        e = refinement_edges[t]
        rolled[t] = np.roll(triangles[t], -e)

    level = MeshLevel(
        coords, rolled,
        vertex_on_boundary=np.zeros(len(coords), dtype=bool),
        vertex_birth=np.zeros(len(coords), dtype=np.int64),
        generation=np.zeros(len(triangles), dtype=np.int64),
        ancestor0=np.arange(len(triangles), dtype=np.int64),
    )
    areas = level.signed_areas()
    if (areas <= 0).any():
        raise DegenerateTriangle(
            "non-positive signed area in triangles %s" % np.flatnonzero(areas <= 0)
        )

    et = level.edge_table
    on_bnd = np.zeros(len(coords), dtype=bool)
    bedges = et.edges[et.boundary_edge]
    on_bnd[bedges.ravel()] = True
    level.vertex_on_boundary = on_bnd
    if boundary_flags is not None:
        boundary_flags = np.asarray(boundary_flags, dtype=bool)
        if not np.array_equal(boundary_flags, on_bnd):
            raise NonConforming("boundary flags inconsistent with the edge table")

    if check_admissible:
        _check_matching_condition(level)
    return level


def _check_matching_condition(level):
    """Every interior edge must be the refinement edge of both or of neither
    adjacent triangle (admissible tag assignment)."""
    et = level.edge_table
    ref_edge_of = et.tri_edges[:, 0]  # normalized: refinement edge is local edge 0
    count = np.zeros(et.n_edges, dtype=np.int64)
    np.add.at(count, ref_edge_of, 1)
    bad = (~et.boundary_edge) & (count == 1)
    if bad.any():
        raise InvalidTag(
            "interior edges %s are the refinement edge of exactly one triangle"
            % np.flatnonzero(bad)
        )


class RefineInfo:
    """Bookkeeping of one refinement step.

    Attributes
    ----------
    parent : (nt_child,) int, parent triangle id per child
    new_vertices : (n_new, 3) int, rows (vertex id, endpoint a, endpoint b)
        where the vertex is the midpoint of the coarse edge (a, b)
    refined_parents : (n_ref,) int, ids of parents that were bisected
    """

    def __init__(self, parent, new_vertices, refined_parents):
        self.parent = parent
        self.new_vertices = new_vertices
        self.refined_parents = refined_parents


def refine(level, marked, n_bisections=1):
    """Coarsest conforming NVB refinement bisecting all marked triangles.

    With ``n_bisections=1`` only the refinement edge of each marked triangle
    is seeded for bisection (each marked element is bisected at least once);
    with ``n_bisections=3`` all three edges are seeded, so every marked
    element is split into four children.  Closure marks the refinement edge
    of any triangle that has a marked edge until a fixpoint is reached; a
    triangle is then bisected once, twice, or three times depending on how
    many of its edges carry a midpoint.

    Returns
    -------
    (MeshLevel, RefineInfo)
    """
    marked = np.asarray(list(marked), dtype=np.int64)
    if marked.size and (marked.min() < 0 or marked.max() >= level.n_triangles):
        raise MeshError("marked set contains unknown triangle ids")
    if n_bisections not in (1, 3):
        raise MeshError("n_bisections must be 1 or 3")
    et = level.edge_table
    tris = level.triangles

    edge_marked = np.zeros(et.n_edges, dtype=bool)
    if n_bisections == 1:
        edge_marked[et.tri_edges[marked, 0]] = True
    else:
        edge_marked[et.tri_edges[marked].ravel()] = True
    while True:
        has_marked = edge_marked[et.tri_edges].any(axis=1)
        want = np.zeros(et.n_edges, dtype=bool)
        want[et.tri_edges[has_marked, 0]] = True
        new = want & ~edge_marked
        if not new.any():
            break
        edge_marked |= new

    # midpoints, appended in edge-id order (deterministic)
    marked_edge_ids = np.flatnonzero(edge_marked)
    n_old = level.n_vertices
    midpoint_of = np.full(et.n_edges, -1, dtype=np.int64)
    midpoint_of[marked_edge_ids] = n_old + np.arange(len(marked_edge_ids))
    mid_coords = 0.5 * (
        level.coords[et.edges[marked_edge_ids, 0]]
        + level.coords[et.edges[marked_edge_ids, 1]]
    )
    coords = np.vstack([level.coords, mid_coords])
    on_bnd = np.concatenate(
        [level.vertex_on_boundary, et.boundary_edge[marked_edge_ids]]
    )
    birth = np.concatenate(
        [level.vertex_birth,
         np.full(len(marked_edge_ids), level.level_index + 1, dtype=np.int64)]
    )
    new_vertices = np.column_stack(
        [midpoint_of[marked_edge_ids], et.edges[marked_edge_ids]]
    )

    child_tris, child_gen, child_anc, child_parent = [], [], [], []

    def emit(tri, gen, anc, parent):
        child_tris.append(tri)
        child_gen.append(gen)
        child_anc.append(anc)
        child_parent.append(parent)

    def bisect_to_children(a, b, c, m, gen, anc, parent, second_mids):
        # children of (a, b, c) bisected at m = midpoint(a, b); each child is
        # bisected again if its refinement edge carries a midpoint
        for child in ((c, a, m), (b, c, m)):
            ca, cb, cc = child
            mm = second_mids.get((min(ca, cb), max(ca, cb)))
            if mm is None:
                emit(child, gen + 1, anc, parent)
            else:
                emit((cc, ca, mm), gen + 2, anc, parent)
                emit((cb, cc, mm), gen + 2, anc, parent)

    for t in range(level.n_triangles):
        e0, e1, e2 = et.tri_edges[t]
        a, b, c = tris[t]
        if not edge_marked[e0]:
            emit((a, b, c), level.generation[t], level.ancestor0[t], t)
            continue
        second = {}
        if edge_marked[e1]:  # edge (b, c)
            second[(min(b, c), max(b, c))] = midpoint_of[e1]
        if edge_marked[e2]:  # edge (c, a)
            second[(min(c, a), max(c, a))] = midpoint_of[e2]
        bisect_to_children(a, b, c, midpoint_of[e0], level.generation[t],
                           level.ancestor0[t], t, second)

    child = MeshLevel(
        coords,
        np.array(child_tris, dtype=np.int64),
        on_bnd,
        birth,
        np.array(child_gen, dtype=np.int64),
        np.array(child_anc, dtype=np.int64),
        level_index=level.level_index + 1,
    )
    parent_arr = np.array(child_parent, dtype=np.int64)
    counts = np.bincount(parent_arr, minlength=level.n_triangles)
    info = RefineInfo(
        parent=parent_arr,
        new_vertices=new_vertices,
        refined_parents=np.flatnonzero(counts > 1),
    )
    return child, info


class MeshHierarchy:
    """Sequence of NVB-refined levels with parent/child and V+ bookkeeping."""

    def __init__(self, initial_level):
        self.levels = [initial_level]
        self.infos = [None]
        self._v_plus = [np.arange(initial_level.n_vertices)]

    @property
    def n_levels(self):
        return len(self.levels)

    @property
    def top(self):
        return self.levels[-1]

    def refine(self, marked, n_bisections=1):
        """Append the refinement of the finest level; returns the new level."""
        child, info = refine(self.top, marked, n_bisections=n_bisections)
        self.levels.append(child)
        self.infos.append(info)
        self._v_plus.append(self._compute_v_plus(child, info))
        return child

    def _compute_v_plus(self, child, info):
        # new vertices plus retained vertices of bisected triangles
        parent_level = self.levels[-2]
        touched = np.unique(parent_level.triangles[info.refined_parents].ravel())
        vp = np.union1d(touched, info.new_vertices[:, 0]) \
            if info.new_vertices.size else touched
        return vp.astype(np.int64)

    def v_plus(self, l):
        """Vertex ids of ``V_l^+``: all vertices for l = 0, else new vertices
        together with retained vertices whose one-ring patch changed."""
        if not 0 <= l < self.n_levels:
            raise MeshError("level %d out of range" % l)
        return self._v_plus[l]

    def new_vertex_triples(self, l):
        """(vertex, a, b) rows for vertices born at level l >= 1."""
        if not 1 <= l < self.n_levels:
            raise MeshError("level %d out of range" % l)
        return self.infos[l].new_vertices

    def truncated(self, l):
        """Shallow hierarchy containing levels 0..l."""
        if not 0 <= l < self.n_levels:
            raise MeshError("level %d out of range" % l)
        h = MeshHierarchy.__new__(MeshHierarchy)
        h.levels = self.levels[:l + 1]
        h.infos = self.infos[:l + 1]
        h._v_plus = self._v_plus[:l + 1]
        return h


def compute_v_plus(hierarchy, l):
    return hierarchy.v_plus(l)


def patch(level, z, n=1):
    """Element ids of the n-patch around vertex z (inductive closure)."""
    if n < 1:
        raise MeshError("patch ring count must be >= 1")
    if not 0 <= z < level.n_vertices:
        raise MeshError("unknown vertex %d" % z)
    vtris = level.vertex_triangles()
    current = set(vtris[z])
    for _ in range(n - 1):
        verts = set(level.triangles[list(current)].ravel())
        nxt = set()
        for v in verts:
            nxt.update(vtris[v])
        current = nxt
    return np.array(sorted(current), dtype=np.int64)


def shape_regularity(level):
    """Diagnostic (max diam/sqrt(area), max neighbor diameter ratio)."""
    diam = level.diameters()
    gamma1 = float((diam / np.sqrt(level.areas())).max())
    et = level.edge_table
    interior = ~et.boundary_edge
    t0 = et.edge_tris[interior, 0]
    t1 = et.edge_tris[interior, 1]
    if len(t0):
        r = diam[t0] / diam[t1]
        gamma2 = float(np.maximum(r, 1.0 / r).max())
    else:
        gamma2 = 1.0
    return gamma1, gamma2


def read_mesh_file(path_or_stream):
    """Read the text mesh format.

    Header ``vertices N triangles M``, then N lines ``x y boundary_flag``,
    then M lines ``v0 v1 v2 refinement_edge_local_index``.
    """
    if hasattr(path_or_stream, "read"):
        text = path_or_stream.read()
    else:
        with open(path_or_stream) as fh:
            text = fh.read()
    tokens = text.split()
    if len(tokens) < 4 or tokens[0] != "vertices" or tokens[2] != "triangles":
        raise MeshError("bad mesh file header")
    nv, nt = int(tokens[1]), int(tokens[3])
    body = tokens[4:]
    if len(body) != 3 * nv + 4 * nt:
        raise MeshError("mesh file has wrong token count")
    vdata = np.array(body[:3 * nv], dtype=float).reshape(nv, 3)
    tdata = np.array(body[3 * nv:], dtype=np.int64).reshape(nt, 4)
    return init_mesh(vdata[:, :2], tdata[:, :3], tdata[:, 3],
                     boundary_flags=vdata[:, 2] != 0)


def write_mesh_file(level, path):
    """Write a MeshLevel in the text mesh format (refinement edge index 0)."""
    buf = io.StringIO()
    buf.write("vertices %d triangles %d\n" % (level.n_vertices, level.n_triangles))
    for (x, y), b in zip(level.coords, level.vertex_on_boundary):
        buf.write("%.17g %.17g %d\n" % (x, y, int(b)))
    for tri in level.triangles:
        buf.write("%d %d %d 0\n" % tuple(tri))
    with open(path, "w") as fh:
        fh.write(buf.getvalue())
