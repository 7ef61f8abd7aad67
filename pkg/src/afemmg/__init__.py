"""Adaptive 2D finite elements with hp-robust geometric multigrid, additive
Schwarz, and BPX preconditioners inside CG/PCG/GPCG solvers, plus the
adaptive solve-estimate-mark-refine driver and an experiment CLI."""

from .mesh import (MeshLevel, MeshHierarchy, init_mesh, refine, patch,
                   compute_v_plus, shape_regularity, read_mesh_file,
                   write_mesh_file)
from .fespace import (FeSpace, build_space, hat_transfer, hat_embedding,
                      embed_selection, dof_selection, patch_interior_dofs,
                      prolong_solution)
from .assembly import (DiffusionField, assemble_stiffness, assemble_load,
                       assemble_level_diagonal, assemble_patch_matrix,
                       energy_norm, write_matrix_market)
from .krylov import (SolveReport, PreconditionerHandle, cg, pcg, gpcg,
                     fixed_point, direct_solve, extreme_eigs, verify_flags)
from .precond import (MgWorkspace, StepSizeRecord, setup, mg_apply,
                      nsmg_apply, smg_apply, as_apply, bpx_apply, make_handle)
from .estimator import IndicatorField, indicators
from .afem import (AfemConfig, AfemLog, adaptive_loop, doerfler_mark,
                   rate_fit)
from .problems import Problem, get_problem, load_builtin_mesh

__version__ = "0.1.0"
