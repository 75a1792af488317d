"""Quasi-local effective diffusion tensors on structured P1 meshes."""

__version__ = "0.1.0"

from . import coefficients, correctors, effective, experiments, fem, geometry, solvers
from ._kernels import numba_enabled
from .geometry import (
    MeshStructureError,
    Patch,
    PeriodicMap,
    TriMesh,
    build_uniform_mesh,
    element_patch,
    interior_faces,
    periodic_identify,
    refine_uniform,
)

__all__ = [
    "__version__",
    "numba_enabled",
    "TriMesh",
    "Patch",
    "PeriodicMap",
    "MeshStructureError",
    "build_uniform_mesh",
    "refine_uniform",
    "element_patch",
    "interior_faces",
    "periodic_identify",
    "coefficients",
    "correctors",
    "effective",
    "experiments",
    "fem",
    "geometry",
    "solvers",
]
