"""Experiment runner: contraction histories, robustness tables, failure
studies, AFEM convergence data, and preconditioner condition sweeps, driven
by a JSON config and written as CSV.

Usage:
    afemmg <experiment> --config cfg.json [--out DIR] [--seed N]
                        [--with-exact] [--large]

Exit codes: 0 success, 2 config error, 3 numerical failure.  The environment
variable AFEMMG_THREADS caps the worker pool for independent sweep cells.
"""

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import afem, assembly, fespace, krylov, mesh, precond, problems

EXPERIMENTS = ("afem", "contraction", "robustness", "condition", "failure")

_CONFIG_KEYS = {
    "experiment", "problem", "solvers", "p_list", "theta", "lambda_stop",
    "levels", "max_level", "max_dofs", "max_cum_dofs", "energy_tol",
    "max_steps", "solver_cap", "seed", "out_dir", "snapshots", "large_level",
}
_PROBLEM_KEYS = {"name", "mesh_file", "kappa_values"}

_DEFAULTS = dict(
    solvers=["GPCG+MG"], p_list=[1], theta=0.5, lambda_stop=0.1,
    levels=[5, 10], max_level=10, max_dofs=None, max_cum_dofs=None,
    energy_tol=1e-13, max_steps=100, solver_cap=400, seed=0,
    out_dir="results", snapshots=False, large_level=15,
)

CONDITION_PRECONDS = ("AS", "sMG", "BPX")


class ConfigError(Exception):
    pass


class NumericalFailure(Exception):
    pass


def load_config(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError("cannot read config: %s" % exc) from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - _CONFIG_KEYS
    if unknown:
        raise ConfigError("unknown config keys: %s" % sorted(unknown))
    cfg = dict(_DEFAULTS)
    cfg.update(raw)
    if cfg.get("experiment") not in EXPERIMENTS:
        raise ConfigError("experiment must be one of %s" % (EXPERIMENTS,))
    prob = cfg.get("problem")
    if not isinstance(prob, dict) or "name" not in prob:
        raise ConfigError("config needs a problem object with a name")
    if set(prob) - _PROBLEM_KEYS:
        raise ConfigError("unknown problem keys: %s"
                          % sorted(set(prob) - _PROBLEM_KEYS))
    for s in cfg["solvers"]:
        if s not in afem.SOLVER_NAMES and s not in CONDITION_PRECONDS:
            raise ConfigError("unknown solver %r" % (s,))
    if not (0 < cfg["theta"] <= 1):
        raise ConfigError("theta must lie in (0, 1]")
    if cfg["lambda_stop"] <= 0:
        raise ConfigError("lambda_stop must be positive")
    if any(int(p) < 1 for p in cfg["p_list"]):
        raise ConfigError("polynomial degrees must be >= 1")
    return cfg


def _problem(cfg):
    prob = cfg["problem"]
    try:
        return problems.get_problem(prob["name"],
                                    mesh_file=prob.get("mesh_file"),
                                    kappa_values=prob.get("kappa_values"))
    except problems.ProblemError as exc:
        raise ConfigError(str(exc)) from exc


def _pool_size():
    env = os.environ.get("AFEMMG_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError("AFEMMG_THREADS must be an integer")
    return min(4, os.cpu_count() or 1)


def _run_cells(fn, cells):
    if len(cells) <= 1 or _pool_size() == 1:
        return [fn(c) for c in cells]
    with ThreadPoolExecutor(max_workers=_pool_size()) as pool:
        return list(pool.map(fn, cells))


def _fmt(x):
    if isinstance(x, float):
        return "%.16e" % x
    return str(x)


def write_csv(path, header, rows, float_cols=()):
    for row in rows:
        for v in row:
            if isinstance(v, float) and not np.isfinite(v):
                raise NumericalFailure("non-finite value in CSV row %r" % (row,))
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    return path


def _generate_hierarchy(problem, p, theta, lambda_stop, max_level):
    """Mesh hierarchy from an AFEM run driven by the standalone multigrid
    solver (the generation recipe of the experiments)."""
    cfg = afem.AfemConfig(theta=theta, lambda_stop=lambda_stop, solver="MG",
                          p=p, max_levels=max_level)
    _, hierarchy, space, _ = afem.adaptive_loop(problem, cfg)
    return hierarchy


def _prepared(problem, hierarchy, p):
    space = fespace.build_space(hierarchy.top, p)
    K = problem.diffusion(hierarchy.levels[0])
    A = assembly.assemble_stiffness(space, K)
    b = assembly.assemble_load(space, problem.load)
    ws = precond.setup(hierarchy, space, A, K)
    x_star = krylov.direct_solve(A, b)
    return space, A, b, ws, x_star


def _iterate(solver, A, b, ws, x_star, energy_tol, cap):
    """Run one solver to the energy-error target; returns its SolveReport."""
    if solver == "MG":
        _, rep = krylov.fixed_point(A, precond.make_handle(ws, "MG"), b,
                                    x_star=x_star, energy_tol=energy_tol,
                                    max_iter=cap, strict=False)
        return rep
    if solver == "GPCG+MG":
        _, rep = krylov.gpcg(A, precond.make_handle(ws, "MG"), b,
                             x_star=x_star, energy_tol=energy_tol,
                             max_iter=cap, strict=False)
        return rep
    kind = {"PCG+AS": "AS", "PCG+sMG": "SMG", "PCG+BPX": "BPX",
            "PCG+MG": "MG", "PCG+nsMG": "NSMG"}[solver]
    _, rep = krylov.pcg(A, precond.make_handle(ws, kind), b, x_star=x_star,
                        energy_tol=energy_tol, max_iter=cap, strict=False,
                        verify=False)
    return rep


def run_contraction(cfg, out_dir):
    """Energy errors and per-step contraction factors on a pre-generated
    hierarchy; columns solver,p,level,k,energy_error,q_k."""
    problem = _problem(cfg)
    rows = []
    for p in cfg["p_list"]:
        hierarchy = _generate_hierarchy(problem, p, cfg["theta"],
                                        cfg["lambda_stop"], cfg["max_level"])
        _, A, b, ws, x_star = _prepared(problem, hierarchy, p)
        level = hierarchy.n_levels - 1
        for solver in cfg["solvers"]:
            rep = _iterate(solver, A, b, ws, x_star, cfg["energy_tol"],
                           cfg["solver_cap"])
            errs = rep.energy_errors
            for k in range(1, len(errs)):
                q = errs[k] / errs[k - 1] if errs[k - 1] > 0 else float("nan")
                if not np.isfinite(q):
                    q = 0.0
                rows.append((solver, p, level, k, errs[k], q))
    return write_csv(os.path.join(out_dir, "contraction.csv"),
                     ["solver", "p", "level", "k", "energy_error", "q_k"],
                     rows)


def run_robustness(cfg, out_dir, large=False):
    """Iteration counts to the energy tolerance; columns solver,p,level,steps."""
    problem = _problem(cfg)
    levels = [l for l in cfg["levels"]
              if large or l < cfg["large_level"]]
    if not levels:
        raise ConfigError("no levels to run (use --large?)")
    cells = []
    for p in cfg["p_list"]:
        hierarchy = _generate_hierarchy(problem, p, cfg["theta"],
                                        cfg["lambda_stop"], max(levels))
        for l in levels:
            cells.append((p, l, hierarchy.truncated(l)))

    def work(cell):
        p, l, h = cell
        _, A, b, ws, x_star = _prepared(problem, h, p)
        out = []
        for solver in cfg["solvers"]:
            rep = _iterate(solver, A, b, ws, x_star, cfg["energy_tol"],
                           max(cfg["solver_cap"], 4000))
            out.append((solver, p, l, rep.n_iter))
        return out

    rows = [r for cell_rows in _run_cells(work, cells) for r in cell_rows]
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    return write_csv(os.path.join(out_dir, "robustness.csv"),
                     ["solver", "p", "level", "steps"], rows)


def run_failure(cfg, out_dir):
    """PCG with the non-symmetric/non-linear multigrid preconditioners, with
    a step cap; non-convergence is the datum.  Columns
    solver,p,final_error,steps."""
    problem = _problem(cfg)
    solvers = cfg["solvers"] or ["PCG+MG", "PCG+nsMG", "GPCG+MG"]
    rows = []
    for p in cfg["p_list"]:
        hierarchy = _generate_hierarchy(problem, p, cfg["theta"],
                                        cfg["lambda_stop"], cfg["max_level"])
        _, A, b, ws, x_star = _prepared(problem, hierarchy, p)
        for solver in solvers:
            rep = _iterate(solver, A, b, ws, x_star, cfg["energy_tol"],
                           cfg["max_steps"])
            rows.append((solver, p, rep.final_energy_error, rep.n_iter))
    return write_csv(os.path.join(out_dir, "failure.csv"),
                     ["solver", "p", "final_error", "steps"], rows)


def run_afem(cfg, out_dir, with_exact=False):
    """Adaptive runs; one CSV per (solver, p) cell with the step log, plus
    optional per-level mesh snapshot files."""
    problem = _problem(cfg)
    paths = []
    for solver in cfg["solvers"]:
        for p in cfg["p_list"]:
            acfg = afem.AfemConfig(
                theta=cfg["theta"], lambda_stop=cfg["lambda_stop"],
                solver=solver, p=p, max_levels=cfg["max_level"],
                max_dofs=cfg["max_dofs"], max_cum_dofs=cfg["max_cum_dofs"],
                solver_cap=cfg["solver_cap"], with_exact=with_exact)
            log, hierarchy, _, _ = afem.adaptive_loop(problem, acfg)
            tag = "%s_p%d" % (solver.replace("+", "-"), p)
            rows = [(s.level, s.k, s.n_elements, s.n_dofs, s.eta,
                     s.increment, s.cum_dofs, s.cum_cost, s.wall_s)
                    for s in log.steps]
            paths.append(write_csv(
                os.path.join(out_dir, "afem_%s.csv" % tag),
                ["level", "k", "n_elements", "n_dofs", "eta", "increment",
                 "cum_dofs", "cum_cost", "wall_s"], rows))
            if cfg["snapshots"]:
                for l, lvl in enumerate(hierarchy.levels):
                    mesh.write_mesh_file(lvl, os.path.join(
                        out_dir, "mesh_%s_l%02d.txt" % (tag, l)))
    return paths


def run_condition(cfg, out_dir, large=False, seed=0):
    """Lanczos extreme eigenvalues of B A per preconditioner, level, degree;
    columns precond,p,level,lmin,lmax,cond."""
    problem = _problem(cfg)
    preconds = [s for s in cfg["solvers"] if s in CONDITION_PRECONDS] \
        or list(CONDITION_PRECONDS)
    levels = [l for l in cfg["levels"] if large or l < cfg["large_level"]]
    cells = []
    for p in cfg["p_list"]:
        hierarchy = _generate_hierarchy(problem, p, cfg["theta"],
                                        cfg["lambda_stop"], max(levels))
        for l in levels:
            cells.append((p, l, hierarchy.truncated(l)))

    def work(cell):
        p, l, h = cell
        space, A, b, ws, _ = _prepared(problem, h, p)
        out = []
        for name in preconds:
            handle = precond.make_handle(ws, name.upper())
            rng = np.random.default_rng(seed + 1000 * p + l)
            lo, hi = krylov.extreme_eigs(lambda v: handle(A @ v), A, m=60,
                                         rng=rng)
            out.append((name, p, l, lo, hi, hi / lo))
        return out

    rows = [r for cell_rows in _run_cells(work, cells) for r in cell_rows]
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    return write_csv(os.path.join(out_dir, "condition.csv"),
                     ["precond", "p", "level", "lmin", "lmax", "cond"], rows)


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="afemmg", description="adaptive FEM multigrid experiments")
    parser.add_argument("experiment", choices=EXPERIMENTS)
    parser.add_argument("--config", required=True)
    parser.add_argument("--out", default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--with-exact", action="store_true")
    parser.add_argument("--large", action="store_true")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
        if cfg["experiment"] != args.experiment:
            raise ConfigError(
                "config is for experiment %r, requested %r"
                % (cfg["experiment"], args.experiment))
        out_dir = args.out or cfg["out_dir"]
        os.makedirs(out_dir, exist_ok=True)
        seed = cfg["seed"] if args.seed is None else args.seed
    except ConfigError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return 2

    try:
        if args.experiment == "contraction":
            run_contraction(cfg, out_dir)
        elif args.experiment == "robustness":
            run_robustness(cfg, out_dir, large=args.large)
        elif args.experiment == "failure":
            run_failure(cfg, out_dir)
        elif args.experiment == "afem":
            run_afem(cfg, out_dir, with_exact=args.with_exact)
        elif args.experiment == "condition":
            run_condition(cfg, out_dir, large=args.large, seed=seed)
    except ConfigError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return 2
    except (krylov.KrylovError, assembly.AssemblyError, precond.PrecondError,
            mesh.MeshError, afem.AfemError, NumericalFailure) as exc:
        print("numerical failure: %s" % exc, file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
