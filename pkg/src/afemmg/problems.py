"""Built-in model problems and their initial meshes."""

from dataclasses import dataclass
from importlib import resources
from typing import Callable, Optional, Union

import numpy as np

from . import mesh
from .assembly import DiffusionField


class ProblemError(Exception):
    pass


def load_builtin_mesh(name):
    """Initial mesh shipped with the package (lshape, square_crisscross,
    square_two, checkerboard)."""
    ref = resources.files("afemmg.meshes").joinpath(name + ".txt")
    with ref.open() as fh:
        return mesh.read_mesh_file(fh)


@dataclass
class Problem:
    """Model problem: initial mesh, diffusion coefficient, load."""

    name: str
    mesh_name: str
    kappa: str = "identity"             # identity | checkerboard | table
    kappa_values: Optional[np.ndarray] = None
    load: Union[float, Callable] = 1.0
    mesh_file: Optional[str] = None     # external file overrides mesh_name
    exact_energy_sq: Optional[float] = None

    def initial_level(self):
        if self.mesh_file is not None:
            return mesh.read_mesh_file(self.mesh_file)
        return load_builtin_mesh(self.mesh_name)

    def diffusion(self, level0):
        if self.kappa == "identity":
            return DiffusionField.identity()
        if self.kappa == "checkerboard":
            return DiffusionField.checkerboard(level0)
        if self.kappa == "table":
            vals = np.asarray(self.kappa_values, dtype=float)
            if vals.shape != (level0.n_triangles,):
                raise ProblemError(
                    "kappa table needs one value per initial element")
            return DiffusionField.scalar_per_t0(vals)
        raise ProblemError("unknown kappa spec %r" % (self.kappa,))


def _sine_load(pts):
    return 2.0 * np.pi ** 2 * np.sin(np.pi * pts[:, 0]) * np.sin(np.pi * pts[:, 1])


def sine_exact(pts):
    return np.sin(np.pi * pts[:, 0]) * np.sin(np.pi * pts[:, 1])


def get_problem(name, mesh_file=None, kappa_values=None):
    """Problem registry: lshape_poisson, checkerboard, manufactured_sine."""
    if name == "lshape_poisson":
        return Problem(name=name, mesh_name="lshape", kappa="identity",
                       load=1.0, mesh_file=mesh_file)
    if name == "checkerboard":
        return Problem(name=name, mesh_name="checkerboard",
                       kappa="checkerboard", load=1.0, mesh_file=mesh_file)
    if name == "manufactured_sine":
        return Problem(name=name, mesh_name="square_crisscross",
                       kappa="identity", load=_sine_load,
                       mesh_file=mesh_file,
                       exact_energy_sq=np.pi ** 2 / 2.0)
    if name == "user_table":
        return Problem(name=name, mesh_name="square_crisscross",
                       kappa="table", kappa_values=kappa_values,
                       load=1.0, mesh_file=mesh_file)
    raise ProblemError("unknown problem %r" % (name,))


PROBLEM_NAMES = ("lshape_poisson", "checkerboard", "manufactured_sine")
