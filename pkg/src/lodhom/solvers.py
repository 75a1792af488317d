"""End-to-end solution operators and worst-case error measurement.

Every solver kind is wrapped as a handle mapping a fine-mesh P1 right-hand
side to a fine-mesh solution vector (coarse solutions are prolongated), with
the adjoint application available for the power iteration that measures the
worst-case L2 error between two handles.  The periodic cell problem provides
the classical homogenization oracle used by the periodic-limit consistency
check.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as spla

from ._kernels import element_gradients
from .correctors import compute_all_correctors
from .effective import assemble_kernel, assemble_local_system, local_coefficient
from .fem import (
    DEFAULT_SOLVER_TOL,
    CoefficientField,
    SolverError,
    assemble_stiffness,
    check_nested,
    corrector_load_vertexwise,
    mass_matrix,
    prolongation_vertexwise,
)

__all__ = [
    "SolverHandle",
    "WorstCaseError",
    "PeriodicHomogenizedTensor",
    "PeriodicLimitReport",
    "make_solver",
    "worst_case_error",
    "classical_cell_tensor",
    "periodic_limit_check",
]

SOLVER_KINDS = ("reference", "standard_fem", "quasilocal", "local", "best_approximation")


class _Factor:
    """Sparse LU with optional mean-constraint augmentation (periodic spaces)."""

    def __init__(self, op, mean_vec=None, what="system"):
        self.n = op.shape[0]
        self.mean_vec = mean_vec
        if mean_vec is None:
            mat = sparse.csc_matrix(op)
        else:
            c = sparse.csr_matrix(mean_vec.reshape(1, -1))
            mat = sparse.bmat([[op, c.T], [c, None]], format="csc")
        try:
            self.lu = spla.splu(mat)
        except RuntimeError as exc:
            raise SolverError(f"singular {what}: {exc}") from exc

    def solve(self, rhs, trans="N"):
        if self.mean_vec is None:
            out = self.lu.solve(rhs, trans=trans)
        else:
            out = self.lu.solve(np.concatenate([rhs, [0.0]]), trans=trans)[:self.n]
        if not np.all(np.isfinite(out)):
            raise SolverError("linear solve produced non-finite values")
        return out


def _coarse_sampled(coarse_mesh, fine_mesh, coeff):
    """Coefficient at coarse barycenters, as the classical unresolved FEM sees it.

    Under red refinement the repeated center child of a coarse element keeps
    the parent barycenter, so the fine-sampled field evaluates there exactly.
    """
    check_nested(coarse_mesh, fine_mesh)
    levels = 0
    n = fine_mesh.n_elements
    while n > coarse_mesh.n_elements:
        n //= 4
        levels += 1
    ids = np.arange(coarse_mesh.n_elements, dtype=np.int64)
    for _ in range(levels):
        ids = 4 * ids + 3
    return CoefficientField(coarse_mesh, coeff.values[ids])


@dataclass
class SolverHandle:
    """Reusable solution operator on the fine mesh with its adjoint."""

    kind: str
    fine_space: object
    coarse_space: object
    _apply: object = field(repr=False, default=None)
    _apply_t: object = field(repr=False, default=None)

    def apply(self, f_full):
        return self._apply(np.asarray(f_full, dtype=np.float64))

    def apply_transpose(self, g_full):
        return self._apply_t(np.asarray(g_full, dtype=np.float64))


def _coarse_handle(kind, system, trans_for_solve, coarse_space, fine_space, M):
    """Handle for a coarse system solved and prolongated to the fine mesh."""
    Pc = (prolongation_vertexwise(coarse_space.mesh, fine_space.mesh)
          @ coarse_space.E).tocsr()
    mean = coarse_space.mean_vector() if coarse_space.kind == "periodic_meanfree" else None
    factor = _Factor(system, mean, what=f"{kind} system")
    flip = {"N": "T", "T": "N"}[trans_for_solve]

    def apply(f):
        rhs = Pc.T @ (M @ f)
        x = factor.solve(rhs, trans=trans_for_solve)
        if mean is not None:
            x = coarse_space.remove_mean(x)
        return Pc @ x

    def apply_t(g):
        x = factor.solve(Pc.T @ g, trans=flip)
        if mean is not None:
            x = coarse_space.remove_mean(x)
        return M @ (Pc @ x)

    return SolverHandle(kind=kind, fine_space=fine_space, coarse_space=coarse_space,
                        _apply=apply, _apply_t=apply_t)


def make_solver(kind, coarse_space, fine_space, coeff, ell=None, correctors=None,
                tensor_field=None, tol=DEFAULT_SOLVER_TOL, threads=1):
    """Build a reusable solution-operator handle of the requested kind.

    quasilocal/local need a CorrectorSet for (coeff, ell); one is computed on
    demand when not supplied.  Right-hand sides are taken as fine-mesh P1
    vertex vectors and tested against (f, basis)_(L2); coarse solutions are
    prolongated to the fine mesh.
    """
    if kind not in SOLVER_KINDS:
        raise ValueError(f"unknown solver kind {kind!r}")
    M = mass_matrix(fine_space.mesh)

    if kind == "reference":
        S = assemble_stiffness(fine_space, coeff)
        mean = fine_space.mean_vector() if fine_space.kind == "periodic_meanfree" else None
        factor = _Factor(S, mean, what="reference system")
        E = fine_space.E

        def apply(f):
            x = factor.solve(E.T @ (M @ f))
            if mean is not None:
                x = fine_space.remove_mean(x)
            return E @ x

        def apply_t(g):
            x = factor.solve(E.T @ g, trans="T")
            if mean is not None:
                x = fine_space.remove_mean(x)
            return M @ (E @ x)

        return SolverHandle(kind=kind, fine_space=fine_space, coarse_space=None,
                            _apply=apply, _apply_t=apply_t)

    if kind == "best_approximation":
        ref = make_solver("reference", coarse_space, fine_space, coeff, tol=tol)
        Pc = (prolongation_vertexwise(coarse_space.mesh, fine_space.mesh)
              @ coarse_space.E).tocsr()
        Mc = (Pc.T @ M @ Pc).tocsc()
        mass_factor = _Factor(Mc, what="coarse mass")

        def apply(f):
            u = ref.apply(f)
            return Pc @ mass_factor.solve(Pc.T @ (M @ u))

        def apply_t(g):
            return ref.apply_transpose(M @ (Pc @ mass_factor.solve(Pc.T @ g)))

        return SolverHandle(kind=kind, fine_space=fine_space,
                            coarse_space=coarse_space, _apply=apply, _apply_t=apply_t)

    if kind == "standard_fem":
        G = assemble_stiffness(coarse_space, _coarse_sampled(coarse_space.mesh,
                                                             fine_space.mesh, coeff))
        return _coarse_handle(kind, G, "N", coarse_space, fine_space, M)

    if correctors is None:
        if ell is None:
            raise ValueError(f"{kind} solver needs ell or a precomputed CorrectorSet")
        correctors = compute_all_correctors(ell, coarse_space, fine_space, coeff,
                                            threads=threads, tol=tol)
    if correctors.fingerprint != coeff.fingerprint:
        raise ValueError("corrector set does not match the coefficient")

    if kind == "quasilocal":
        from .effective import assemble_quasilocal_system
        G = assemble_quasilocal_system(correctors, coeff, coarse_space, fine_space)
        # system rows are tested against basis functions: solve G^T u = rhs
        return _coarse_handle(kind, G, "T", coarse_space, fine_space, M)

    # kind == "local"
    if tensor_field is None:
        kernel = assemble_kernel(correctors, coeff)
        tensor_field = local_coefficient(kernel)
    G = assemble_local_system(tensor_field, coarse_space)
    return _coarse_handle(kind, G, "N", coarse_space, fine_space, M)


@dataclass
class WorstCaseError:
    sigma: float
    iterations: int
    residual: float
    converged: bool
    history: list = field(default_factory=list)


def worst_case_error(a, b, tol=1e-6, max_iter=500, mass=None, mass_factor=None):
    """Largest singular value of the difference of two solution operators.

    Power iteration on the mass-weighted normal operator with the
    mass-normalized all-ones start vector; converged when successive sigma
    estimates differ by less than tol relatively.  The estimates are
    Rayleigh quotients of a PSD operator, hence nondecreasing.
    """
    if a.fine_space is not b.fine_space:
        raise ValueError("handles must share the fine space")
    mesh = a.fine_space.mesh
    M = mass_matrix(mesh) if mass is None else mass
    Mf = _Factor(sparse.csc_matrix(M), what="mass matrix") if mass_factor is None else mass_factor

    v = np.ones(mesh.n_vertices)
    v /= math.sqrt(v @ (M @ v))
    sigma_prev = None
    sigma = 0.0
    residual = np.inf
    history = []
    for it in range(1, max_iter + 1):
        w = a.apply(v) - b.apply(v)
        lam = float(w @ (M @ w))
        sigma = math.sqrt(max(lam, 0.0))
        history.append(sigma)
        if sigma == 0.0:
            return WorstCaseError(sigma=0.0, iterations=it, residual=0.0,
                                  converged=True, history=history)
        if sigma_prev is not None:
            residual = abs(sigma - sigma_prev) / sigma
            if residual < tol:
                return WorstCaseError(sigma=sigma, iterations=it,
                                      residual=residual, converged=True,
                                      history=history)
        sigma_prev = sigma
        Mw = M @ w
        z = a.apply_transpose(Mw) - b.apply_transpose(Mw)
        v = Mf.solve(z)
        nrm = math.sqrt(max(v @ (M @ v), 0.0))
        if nrm == 0.0:
            return WorstCaseError(sigma=0.0, iterations=it, residual=0.0,
                                  converged=True, history=history)
        v /= nrm
    return WorstCaseError(sigma=sigma, iterations=max_iter,
                          residual=residual, converged=False, history=history)


@dataclass
class PeriodicHomogenizedTensor:
    A0: np.ndarray
    mesh_signature: tuple
    corrector_energies: np.ndarray


def classical_cell_tensor(coeff, periodic_space):
    """Homogenized tensor from the periodic cell problem on the cell mesh."""
    if periodic_space.kind != "periodic_meanfree":
        raise ValueError("classical_cell_tensor needs a periodic mean-free space")
    mesh = periodic_space.mesh
    S = assemble_stiffness(periodic_space, coeff)
    mean_vec = periodic_space.mean_vector()
    factor = _Factor(S, mean_vec, what="periodic cell system")

    all_elems = np.arange(mesh.n_elements)
    vol = float(mesh.areas.sum())
    A0 = np.empty((2, 2))
    energies = np.empty(2)
    for j in (0, 1):
        rhs = periodic_space.E.T @ corrector_load_vertexwise(mesh, coeff, all_elems, j)
        qj = periodic_space.remove_mean(factor.solve(rhs))
        energies[j] = float(qj @ (S @ qj))
        grads = element_gradients(mesh.basis_grads, mesh.elements,
                                  periodic_space.E @ qj)
        ej = np.zeros(2)
        ej[j] = 1.0
        direction = ej[None, :] - grads
        for k in (0, 1):
            A0[j, k] = float(np.einsum(
                "t,td,td->", mesh.areas, direction, coeff.values[:, :, k])) / vol
    return PeriodicHomogenizedTensor(A0=A0, mesh_signature=mesh.signature(),
                                     corrector_energies=energies)


@dataclass
class PeriodicLimitReport:
    mean_tensor: np.ndarray
    constancy_deviation: float
    cell_tensor: np.ndarray
    mean_vs_cell: float
    ell_decay: list
    aligned: bool
    field_values: np.ndarray


def periodic_limit_check(coeff, coarse_space, fine_space, ell_list=None,
                         constancy_tol=1e-6, threads=1, max_global_dofs=None):
    """Consistency of the idealized local coefficient with classical homogenization.

    Reports (i) the elementwise deviation of the idealized field from its
    mean, (ii) the distance of that mean to the cell-problem tensor on the
    same fine mesh, and (iii) the decay of the truncation error over the
    oversampling orders in ell_list.  Misalignment shows up as a constancy
    failure and is flagged, not raised.
    """
    from .geometry import grow_patch

    kwargs = {}
    if max_global_dofs is not None:
        kwargs["max_global_dofs"] = max_global_dofs
    cset_inf = compute_all_correctors(math.inf, coarse_space, fine_space, coeff,
                                      threads=threads, **kwargs)
    field_inf = local_coefficient(assemble_kernel(cset_inf, coeff))
    areas = coarse_space.mesh.areas
    mean = np.einsum("t,tde->de", areas, field_inf.values) / areas.sum()
    constancy = float(np.abs(field_inf.values - mean[None]).max())

    cell = classical_cell_tensor(coeff, fine_space)
    mean_vs_cell = float(np.abs(mean - cell.A0).max())

    if ell_list is None:
        cover = 0
        cm = coarse_space.mesh
        while grow_patch(cm, [0], cover, periodic=coarse_space.periodic_map).size < cm.n_elements:
            cover += 1
        ell_list = list(range(cover + 1))
    decay = []
    for ell in ell_list:
        cset = compute_all_correctors(ell, coarse_space, fine_space, coeff,
                                      threads=threads, **kwargs)
        f_ell = local_coefficient(assemble_kernel(cset, coeff))
        decay.append((ell, float(np.abs(field_inf.values - f_ell.values).max())))

    return PeriodicLimitReport(
        mean_tensor=mean, constancy_deviation=constancy, cell_tensor=cell.A0,
        mean_vs_cell=mean_vs_cell, ell_decay=decay,
        aligned=constancy <= constancy_tol, field_values=field_inf.values)
