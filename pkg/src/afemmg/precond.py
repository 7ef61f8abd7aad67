"""Multilevel preconditioners over a shared prepared hierarchy: the
non-linear multigrid V-cycle with per-level optimal step sizes, its
linearized (fixed step) and symmetrized variants, the additive Schwarz sum,
and BPX.

All residual transport runs on arrays indexed by global vertex id, which is
possible because refinement only appends vertices.  Restriction folds the
entries of vertices born at a level into their two edge endpoints with weight
1/2; prolongation mirrors this.  Intermediate levels touch only rows of the
level's lowest-order matrix belonging to the active vertex set, keeping the
per-cycle work proportional to the finest triangle count.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import assembly
from .assembly import FactorizationFailure
from .fespace import hat_embedding, patch_interior_dofs
from .krylov import PreconditionerHandle

D_SPACE = 2
LAMBDA_CAP = D_SPACE + 1          # step-size cap d + 1
LAMBDA_FIXED = 1.0 / (D_SPACE + 1)


class PrecondError(Exception):
    pass


@dataclass
class StepSizeRecord:
    """Per-level line-search data of one V-cycle: (nu, lambda) pairs indexed
    by level, with lambda_0 = 1 for the coarse solve."""

    nus: list = field(default_factory=list)
    lambdas: list = field(default_factory=list)

    def append(self, nu, lam):
        self.nus.append(nu)
        self.lambdas.append(lam)


class _PatchGroup:
    """Patches of equal dimension, factored and applied in batch."""

    def __init__(self, dof_lists, matrices):
        self.idx = np.array(dof_lists, dtype=np.int64)       # (np, s)
        stack = np.array(matrices)                           # (np, s, s)
        try:
            self.chol = np.linalg.cholesky(stack)
        except np.linalg.LinAlgError as exc:
            raise FactorizationFailure("patch matrix not SPD") from exc
        self.inv = np.linalg.inv(stack)
        self.size = self.idx.shape[1]

    def apply(self, resid, out):
        """out += patchwise A_z^{-1} applied to resid; returns the sum of
        local energies rho_z^T resid_z."""
        loc = resid[self.idx]
        y = np.einsum("pij,pj->pi", self.inv, loc)
        out += np.bincount(self.idx.ravel(), weights=y.ravel(),
                           minlength=len(out))
        return float((y * loc).sum())


class MgWorkspace:
    """Prepared multilevel data shared by all preconditioners.

    Built once per (hierarchy, space, Galerkin matrix); immutable afterwards
    and safe for concurrent applies.
    """

    def __init__(self, hierarchy, space, A, K, restrict_high_order=None):
        if hierarchy.n_levels < 1:
            raise PrecondError("empty hierarchy")
        if space.level is not hierarchy.top:
            raise PrecondError("space must live on the finest level")
        self.hierarchy = hierarchy
        self.space = space
        self.A = sp.csr_matrix(A)
        self.K = K
        self.L = hierarchy.n_levels - 1
        self.p = space.p
        if restrict_high_order is None:
            restrict_high_order = space.p == 1
        self.restrict_high_order = restrict_high_order

        top = hierarchy.top
        self.n_vertices = top.n_vertices
        self.E = hat_embedding(space)
        self.ET = sp.csr_matrix(self.E.T)

        # per-level fold triples (only interior new vertices act as sources)
        self.fold = []
        for l in range(1, self.L + 1):
            tr = hierarchy.new_vertex_triples(l)
            keep = ~top.vertex_on_boundary[tr[:, 0]]
            self.fold.append(tr[keep])

        # level 0 coarse matrix on interior vertices
        lvl0 = hierarchy.levels[0]
        P1_0 = assembly.assemble_p1_all_vertices(lvl0, K)
        self.int0 = np.flatnonzero(~lvl0.vertex_on_boundary[:lvl0.n_vertices])
        if len(self.int0):
            A00 = sp.csc_matrix(P1_0[np.ix_(self.int0, self.int0)])
            try:
                self._coarse = spla.splu(A00)
            except RuntimeError as exc:
                raise FactorizationFailure("coarse factorization failed") from exc
        else:
            self._coarse = None
        self._nnz_coarse = P1_0.nnz

        # intermediate levels: interior V+ ids, matrix rows, diagonals, and
        # the (V+, V+) block used for the step-size denominator
        self.vplus_int = [None] * (self.L + 1)
        self.rows_plus = [None] * (self.L + 1)
        self.block_plus = [None] * (self.L + 1)
        self.diag_plus = [None] * (self.L + 1)
        for l in range(1, self.L):
            lvl = hierarchy.levels[l]
            vp = hierarchy.v_plus(l)
            vp = vp[~lvl.vertex_on_boundary[vp]]
            self.vplus_int[l] = vp
            P1 = assembly.assemble_p1_all_vertices(lvl, K)
            rows = sp.csr_matrix(P1[vp])
            self.block_plus[l] = sp.csr_matrix(rows[:, vp])
            rows.resize((len(vp), self.n_vertices))
            self.rows_plus[l] = rows
            self.diag_plus[l] = P1.diagonal()[vp]
            if (self.diag_plus[l] <= 0).any():
                raise FactorizationFailure("non-positive level diagonal")

        # finest-level patch data; the multigrid sweeps may restrict the
        # patch set to V+ for p = 1, but the additive Schwarz sum always
        # runs over all vertices
        if self.restrict_high_order and self.L >= 1:
            zs = hierarchy.v_plus(self.L)
        else:
            zs = np.arange(top.n_vertices)
        self.patch_vertices = zs
        self._build_patches(zs)
        if space.p == 1:
            ids = np.flatnonzero(~space.level.vertex_on_boundary)
            self._full_diag_dofs = space.dof_of_node[ids]
            self._full_diag = self.A.diagonal()[self._full_diag_dofs]
        else:
            self._full_diag_dofs = None
        self.work = 0

    # -- setup helpers -------------------------------------------------

    def _build_patches(self, zs):
        space = self.space
        if space.p == 1:
            ids = zs[~space.level.vertex_on_boundary[zs]]
            dofs = space.dof_of_node[ids]
            self._patch_diag_dofs = dofs
            self._patch_diag = self.A.diagonal()[dofs]
            self.patch_groups = []
            self.n_patches = len(dofs)
            return
        em = assembly.element_stiffness_matrices(space, self.K)
        by_size = {}
        count = 0
        for z in zs:
            dofs, M, _ = assembly.assemble_patch_matrix(
                space, z, self.K, element_matrices=em)
            if len(dofs) == 0:
                continue
            by_size.setdefault(len(dofs), ([], []))
            by_size[len(dofs)][0].append(dofs)
            by_size[len(dofs)][1].append(M)
            count += 1
        self._patch_diag_dofs = None
        self.patch_groups = [ _PatchGroup(d, m)
                              for _, (d, m) in sorted(by_size.items()) ]
        self.n_patches = count

    # -- elementary moves ----------------------------------------------

    def patch_sweep(self, resid):
        """Additive patch corrections against the given fine residual.

        Returns (rho, num) with rho = sum of local solutions scattered into a
        free-dof vector and num = sum of the local energies |rho_z|^2_A.
        """
        rho = np.zeros(self.space.n_dofs)
        if self._patch_diag_dofs is not None:
            d = self._patch_diag_dofs
            y = resid[d] / self._patch_diag
            rho[d] = y
            self.work += len(d)
            return rho, float(y @ resid[d])
        num = 0.0
        for g in self.patch_groups:
            num += g.apply(resid, rho)
            self.work += g.idx.size * g.size
        return rho, num

    def patch_sweep_all_vertices(self, resid):
        """Patch corrections over all vertices regardless of the p = 1
        multigrid restriction (the additive Schwarz finest-level sum)."""
        if self._full_diag_dofs is None:
            return self.patch_sweep(resid)[0]
        rho = np.zeros(self.space.n_dofs)
        d = self._full_diag_dofs
        rho[d] = resid[d] / self._full_diag
        self.work += len(d)
        return rho

    def restrict_to_hats(self, r):
        out = self.ET @ r
        self.work += self.E.nnz
        return out

    def fold_down(self, vec, l):
        """In-place restriction of a vertex array past level l."""
        tr = self.fold[l - 1]
        if len(tr):
            np.add.at(vec, tr[:, 1], 0.5 * vec[tr[:, 0]])
            np.add.at(vec, tr[:, 2], 0.5 * vec[tr[:, 0]])
            self.work += 2 * len(tr)

    def prolong_up(self, vec, l):
        """In-place prolongation of a vertex array into level l."""
        tr = self.fold[l - 1]
        if len(tr):
            vec[tr[:, 0]] = 0.5 * (vec[tr[:, 1]] + vec[tr[:, 2]])
            self.work += 2 * len(tr)

    def coarse_solve_into(self, W, rhs_int0):
        if self._coarse is not None:
            W[self.int0] = self._coarse.solve(rhs_int0)
            self.work += self._nnz_coarse

    def finest_matvec(self, x):
        self.work += self.A.nnz
        return self.A @ x

    def embed(self, W):
        self.work += self.E.nnz
        return self.E @ W

    def level_residual(self, l, saved, W):
        """Active-row residual saved - (A_l W) on the interior V+ set."""
        self.work += self.rows_plus[l].nnz
        return saved - self.rows_plus[l] @ W

    def level_energy(self, l, c):
        """|rho_l|^2_A via the (V+, V+) block (c supported on V+)."""
        self.work += self.block_plus[l].nnz
        return float(c @ (self.block_plus[l] @ c))


def setup(hierarchy, space, A, K, restrict_high_order=None):
    """Prepare the shared multilevel workspace (factorizations, diagonals,
    patch factors, fold tables)."""
    return MgWorkspace(hierarchy, space, A, K,
                       restrict_high_order=restrict_high_order)


def _descend_residual(ws, r):
    """Fold the fine residual down, saving the interior-V+ slices per level.

    Returns (R, saved) where R holds the level-0 state.
    """
    R = ws.restrict_to_hats(r)
    saved = [None] * (ws.L + 1)
    for l in range(ws.L, 0, -1):
        if 1 <= l <= ws.L - 1:
            saved[l] = R[ws.vplus_int[l]].copy()
        ws.fold_down(R, l)
    return R, saved


def mg_apply(ws, r, record=None):
    """One V-cycle of the non-linear multigrid preconditioner.

    Coarse solve, then ascending levelwise diagonal corrections on the active
    vertex sets with per-level optimal step sizes capped at d + 1, then
    additive high-order patch corrections with the uncapped optimal step.
    Returns (s, StepSizeRecord).
    """
    if record is None:
        record = StepSizeRecord()
    R, saved = _descend_residual(ws, r)
    W = np.zeros(ws.n_vertices)
    ws.coarse_solve_into(W, R[ws.int0])
    record.append(1.0, 1.0)
    for l in range(1, ws.L):
        ws.prolong_up(W, l)
        z = ws.vplus_int[l]
        rt = ws.level_residual(l, saved[l], W)
        c = rt / ws.diag_plus[l]
        num = float(c @ rt)
        den = ws.level_energy(l, c)
        if den <= 0.0 or num <= 0.0:
            record.append(0.0, 0.0)
            continue
        nu = num / den
        lam = nu if nu <= LAMBDA_CAP else 1.0 / LAMBDA_CAP
        W[z] += lam * c
        record.append(nu, lam)
    if ws.L >= 1:
        ws.prolong_up(W, ws.L)
    s = ws.embed(W)
    resid_p = r - ws.finest_matvec(s)
    rho, num = ws.patch_sweep(resid_p)
    den = float(rho @ ws.finest_matvec(rho))
    if den <= 0.0 or num <= 0.0:
        record.append(0.0, 0.0)
        return s, record
    nu = num / den
    record.append(nu, nu)          # finest step size is uncapped
    return s + nu * rho, record


def nsmg_apply(ws, r):
    """Linearized V-cycle: fixed step 1/(d+1) on every level above the
    coarse solve, making the operator linear and non-symmetric."""
    R, saved = _descend_residual(ws, r)
    W = np.zeros(ws.n_vertices)
    ws.coarse_solve_into(W, R[ws.int0])
    for l in range(1, ws.L):
        ws.prolong_up(W, l)
        z = ws.vplus_int[l]
        rt = ws.level_residual(l, saved[l], W)
        W[z] += LAMBDA_FIXED * (rt / ws.diag_plus[l])
    if ws.L >= 1:
        ws.prolong_up(W, ws.L)
    s = ws.embed(W)
    resid_p = r - ws.finest_matvec(s)
    rho, _ = ws.patch_sweep(resid_p)
    return s + LAMBDA_FIXED * rho


def smg_apply(ws, r):
    """Symmetrized V-cycle: fixed-step pre-smoothing sweep finest -> coarse,
    coarse solve with step one, then the mirrored post-smoothing sweep."""
    lam = LAMBDA_FIXED
    # (i) high-order pre-smoothing against the raw residual
    rho_dn, _ = ws.patch_sweep(r)
    r1 = r - lam * ws.finest_matvec(rho_dn)

    # (ii) descend: R carries the restriction of r1, G the energy products of
    # the intermediate down-corrections (finer-level pieces only)
    R = ws.restrict_to_hats(r1)
    G = np.zeros(ws.n_vertices)
    saved_r = [None] * (ws.L + 1)
    saved_g = [None] * (ws.L + 1)
    saved_c = [None] * (ws.L + 1)
    if ws.L >= 1:
        ws.fold_down(R, ws.L)
        ws.fold_down(G, ws.L)
    for l in range(ws.L - 1, 0, -1):
        z = ws.vplus_int[l]
        rt = R[z] - G[z]
        c = rt / ws.diag_plus[l]
        saved_r[l] = R[z].copy()
        saved_c[l] = c
        G += ws.rows_plus[l].T @ (lam * c)
        ws.work += ws.rows_plus[l].nnz
        saved_g[l] = G[z].copy()
        ws.fold_down(R, l)
        ws.fold_down(G, l)

    # (iii) coarse solve with step one
    W = np.zeros(ws.n_vertices)
    ws.coarse_solve_into(W, R[ws.int0] - G[ws.int0])

    # (iv) ascend, folding the saved down-corrections into the carried field
    for l in range(1, ws.L):
        ws.prolong_up(W, l)
        z = ws.vplus_int[l]
        rt = saved_r[l] - saved_g[l] - (ws.rows_plus[l] @ W)
        ws.work += ws.rows_plus[l].nnz
        W[z] += lam * (rt / ws.diag_plus[l] + saved_c[l])
    if ws.L >= 1:
        ws.prolong_up(W, ws.L)

    # (v) high-order post-smoothing
    s_lin = ws.embed(W) + lam * rho_dn
    resid_p = r - ws.finest_matvec(s_lin)
    rho_up, _ = ws.patch_sweep(resid_p)
    return s_lin + lam * rho_up


def as_apply(ws, r):
    """Additive Schwarz: coarse solve plus levelwise diagonal solves on the
    active vertex sets plus finest-level patch solves, all independent."""
    R, saved = _descend_residual(ws, r)
    W = np.zeros(ws.n_vertices)
    ws.coarse_solve_into(W, R[ws.int0])
    for l in range(1, ws.L):
        ws.prolong_up(W, l)
        z = ws.vplus_int[l]
        W[z] += saved[l] / ws.diag_plus[l]
    if ws.L >= 1:
        ws.prolong_up(W, ws.L)
    rho = ws.patch_sweep_all_vertices(r)
    return ws.embed(W) + rho


def bpx_apply(ws, r):
    """BPX: coarse solve plus unscaled hat products over all interior
    vertices of the intermediate levels plus the identity on the finest
    degree-p dofs."""
    levels = ws.hierarchy.levels
    R = ws.restrict_to_hats(r)
    saved = [None] * (ws.L + 1)
    for l in range(ws.L, 0, -1):
        if l <= ws.L - 1:
            lvl = levels[l]
            saved[l] = R[:lvl.n_vertices].copy()
        ws.fold_down(R, l)
    W = np.zeros(ws.n_vertices)
    ws.coarse_solve_into(W, R[ws.int0])
    for l in range(1, ws.L):
        ws.prolong_up(W, l)
        lvl = levels[l]
        interior = ~lvl.vertex_on_boundary[:lvl.n_vertices]
        W[:lvl.n_vertices][interior] += saved[l][interior]
        ws.work += int(interior.sum())
    if ws.L >= 1:
        ws.prolong_up(W, ws.L)
    return ws.embed(W) + r


def make_handle(ws, kind):
    """PreconditionerHandle for one of MG, nsMG, sMG, AS, BPX."""
    kind = kind.upper()
    if kind == "MG":
        return PreconditionerHandle(lambda r: mg_apply(ws, r)[0],
                                    is_linear=False, is_symmetric=False,
                                    name="MG")
    if kind == "NSMG":
        return PreconditionerHandle(lambda r: nsmg_apply(ws, r),
                                    is_linear=True, is_symmetric=False,
                                    name="nsMG")
    if kind == "SMG":
        return PreconditionerHandle(lambda r: smg_apply(ws, r),
                                    is_linear=True, is_symmetric=True,
                                    name="sMG")
    if kind == "AS":
        return PreconditionerHandle(lambda r: as_apply(ws, r),
                                    is_linear=True, is_symmetric=True,
                                    name="AS")
    if kind == "BPX":
        return PreconditionerHandle(lambda r: bpx_apply(ws, r),
                                    is_linear=True, is_symmetric=True,
                                    name="BPX")
    raise PrecondError("unknown preconditioner kind %r" % (kind,))
