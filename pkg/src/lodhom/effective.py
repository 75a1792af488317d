"""Quasi-local kernel, localized effective coefficient, and indicator.

The corrector fluxes define a block-sparse kernel over coarse element pairs;
row-summing it compresses the quasi-local model to a piecewise-constant
tensor field whose spectral bounds and inter-element jumps feed the
computable homogenization indicator.  Kernel assembly is independent per
block row; all products are immutable after assembly.
"""

import csv
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sparse

from ._kernels import element_gradients, scatter_rows
from .correctors import corrector_matrix
from .fem import (
    CoefficientField,
    assemble_stiffness,
    fine_elements_by_parent,
    prolongation,
    stiffness_from_values,
)

__all__ = [
    "KernelBlockMatrix",
    "LocalTensorField",
    "EstimatorReport",
    "assemble_kernel",
    "assemble_quasilocal_system",
    "quasilocal_system_from_kernel",
    "local_coefficient",
    "spectral_bounds",
    "eta_estimator",
    "assemble_local_system",
    "export_tensor_csv",
    "export_kernel_csv",
]


@dataclass
class KernelBlockMatrix:
    """Block-sparse map (T, K) -> 2x2 kernel matrix plus diagonal means."""

    coarse_mesh: object
    ell: object
    blocks: dict
    diagonal_means: np.ndarray

    def block(self, T, K):
        return self.blocks.get((T, K), np.zeros((2, 2)))


@dataclass
class LocalTensorField:
    """Piecewise-constant 2x2 tensor per coarse element with derived bounds."""

    mesh: object
    values: np.ndarray
    alpha_H: float
    beta_H: float
    face_jumps: np.ndarray

    @property
    def positive(self):
        return self.alpha_H > 0.0


@dataclass
class EstimatorReport:
    eta: float | None
    max_face_jump: float
    alpha_H: float
    beta_H: float
    H: float


def _sym_bounds(values):
    a, b, d = values[:, 0, 0], 0.5 * (values[:, 0, 1] + values[:, 1, 0]), values[:, 1, 1]
    mean = 0.5 * (a + d)
    rad = np.sqrt((0.5 * (a - d)) ** 2 + b ** 2)
    return float((mean - rad).min()), float((mean + rad).max())


def element_means(coeff, fine_by_coarse, coarse_areas):
    """Volume average of the fine-sampled tensor per coarse element."""
    ntc = len(fine_by_coarse)
    means = np.empty((ntc, 2, 2))
    fa = coeff.mesh.areas
    for T in range(ntc):
        sub = fine_by_coarse[T]
        means[T] = np.einsum("t,tde->de", fa[sub], coeff.values[sub]) / coarse_areas[T]
    return means


def assemble_kernel(cset, coeff):
    """Kernel blocks from corrector fluxes integrated per coarse element."""
    if coeff.fingerprint != cset.fingerprint:
        raise ValueError("coefficient fingerprint does not match the corrector set")
    cm, fm = cset.coarse_mesh, cset.fine_mesh
    if fm is cm:
        fine_by_coarse = [np.array([t]) for t in range(cm.n_elements)]
        parent = np.arange(fm.n_elements)
    else:
        fine_by_coarse = fine_elements_by_parent(fm, cm.n_elements)
        parent = fm.parent_of
    means = element_means(coeff, fine_by_coarse, cm.areas)

    blocks = {}
    areas_c = cm.areas
    for T in range(cm.n_elements):
        sub = np.concatenate([fine_by_coarse[k] for k in cset.patches[T].elements])
        acc = np.zeros((cm.n_elements, 2, 2))
        touched = np.zeros(cm.n_elements, dtype=bool)
        for k in (0, 1):
            vert = cset.fine_space.E @ cset.vector(T, k)
            grads = element_gradients(fm.basis_grads[sub], fm.elements[sub], vert)
            flux = fm.areas[sub, None] * np.einsum(
                "tde,te->td", coeff.values[sub], grads)
            sums = scatter_rows(parent[sub], flux, cm.n_elements)
            nz = np.abs(sums).sum(axis=1) > 0.0
            acc[nz, :, k] = sums[nz]
            touched |= nz
        for K in np.flatnonzero(touched):
            blocks[(T, K)] = acc[K] / (areas_c[T] * areas_c[K])
    return KernelBlockMatrix(coarse_mesh=cm, ell=cset.ell, blocks=blocks,
                             diagonal_means=means)


def local_coefficient(kernel, correctors=None, coeff=None, check_tol=1e-10):
    """Row-sum compression of the kernel into a local tensor field.

    When the corrector set and coefficient are supplied, the equivalent
    patch-integral form (characteristic-function route) is computed
    independently and both expressions are required to agree to check_tol.
    """
    cm = kernel.coarse_mesh
    ntc = cm.n_elements
    values = kernel.diagonal_means.copy()
    for (T, K), block in kernel.blocks.items():
        values[T] -= cm.areas[K] * block

    if correctors is not None and coeff is not None:
        alt = _remark_route(correctors, coeff)
        dev = np.abs(values - alt).max()
        if dev > check_tol:
            raise AssertionError(
                f"local coefficient routes disagree by {dev:.3e} > {check_tol:g}")

    alpha_H, beta_H = _sym_bounds(values)
    face_jumps = _face_jumps(cm, values)
    return LocalTensorField(mesh=cm, values=values, alpha_H=alpha_H, beta_H=beta_H,
                            face_jumps=face_jumps)


def _remark_route(cset, coeff):
    """Direct patch-integral expression for the local coefficient."""
    cm, fm = cset.coarse_mesh, cset.fine_mesh
    if fm is cm:
        fine_by_coarse = [np.array([t]) for t in range(cm.n_elements)]
    else:
        fine_by_coarse = fine_elements_by_parent(fm, cm.n_elements)
    out = np.empty((cm.n_elements, 2, 2))
    fa = fm.areas
    for T in range(cm.n_elements):
        sub = fine_by_coarse[T]
        base = np.einsum("t,tde->de", fa[sub], coeff.values[sub])
        for k in (0, 1):
            idx, vals = cset.data[(T, k)]
            vert = np.zeros(fm.n_vertices)
            vert += cset.fine_space.E[:, idx] @ vals
            grads = element_gradients(fm.basis_grads, fm.elements, vert)
            fluxsum = np.einsum("t,tde,te->d", fa, coeff.values, grads)
            out[T, :, k] = (base[:, k] - fluxsum) / cm.areas[T]
    return out


def _face_jumps(mesh, values):
    faces = mesh.faces
    if faces.shape[0] == 0:
        return np.zeros(0)
    diff = values[faces[:, 2]] - values[faces[:, 3]]
    return np.abs(diff).reshape(faces.shape[0], 4).max(axis=1)


def spectral_bounds(field):
    """Extremal eigenvalues of the symmetric parts over all elements."""
    return _sym_bounds(field.values)


def eta_estimator(field, mesh):
    """Homogenization indicator from inter-element jumps and coercivity."""
    jumps = _face_jumps(mesh, field.values) if field.mesh is not mesh else field.face_jumps
    J = float(jumps.max()) if jumps.size else 0.0
    alpha_H, beta_H = field.alpha_H, field.beta_H
    H = mesh.mesh_size_H
    if alpha_H <= 0.0:
        return EstimatorReport(eta=None, max_face_jump=J, alpha_H=alpha_H,
                               beta_H=beta_H, H=H)
    eta = (J / H) * (1.0 + J / alpha_H)
    return EstimatorReport(eta=eta, max_face_jump=J, alpha_H=alpha_H,
                           beta_H=beta_H, H=H)


def assemble_quasilocal_system(cset, coeff, coarse_space, fine_space):
    """Coarse matrix G with G[i, j] = a(P e_i, (P - Q) e_j) via fine operators."""
    if coeff.fingerprint != cset.fingerprint:
        raise ValueError("coefficient fingerprint does not match the corrector set")
    S = assemble_stiffness(fine_space, coeff)
    P = prolongation(coarse_space, fine_space)
    Q = corrector_matrix(cset)
    G = (P.T @ (S @ (P - Q))).tocsr()
    G.sum_duplicates()
    return G


def quasilocal_system_from_kernel(kernel, coarse_space):
    """Same coarse matrix assembled from the kernel double sum (test route)."""
    cm = kernel.coarse_mesh
    dof = coarse_space.dof_map[cm.elements]
    grads = cm.basis_grads
    areas = cm.areas
    n = coarse_space.ndof
    G = np.zeros((n, n))
    # volume-average diagonal part: standard stiffness with the mean tensor
    mean_field = CoefficientField(cm, kernel.diagonal_means)
    G += assemble_stiffness(coarse_space, mean_field).toarray()
    # kernel part: -sum over blocks of |T||K| grad_i|_K . block . grad_j|_T
    for (T, K), block in kernel.blocks.items():
        w = areas[T] * areas[K]
        gK = grads[K]
        gT = grads[T]
        contrib = w * np.einsum("id,de,je->ij", gK, block, gT)
        for a in range(3):
            i = dof[K, a]
            if i < 0:
                continue
            for b in range(3):
                j = dof[T, b]
                if j < 0:
                    continue
                G[i, j] -= contrib[a, b]
    return sparse.csr_matrix(G)


def assemble_local_system(field, coarse_space):
    """Standard coarse P1 stiffness with the piecewise-constant tensor field."""
    if not field.positive:
        warnings.warn(
            f"local tensor field is not positive (alpha_H={field.alpha_H:g}); "
            "solvability of the local system is not guaranteed", RuntimeWarning)
    S = stiffness_from_values(field.mesh, field.values)
    return (coarse_space.E.T @ S @ coarse_space.E).tocsr()


def export_tensor_csv(field, path):
    """One row per coarse element: id, barycenter, four tensor entries."""
    bc = field.mesh.barycenters
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["element", "x", "y", "A11", "A12", "A21", "A22"])
        for T in range(field.mesh.n_elements):
            v = field.values[T]
            writer.writerow([T, f"{bc[T, 0]:.16e}", f"{bc[T, 1]:.16e}",
                             *(f"{v[r, c]:.16e}" for r in range(2) for c in range(2))])


def export_kernel_csv(kernel, path):
    """One row per stored block: T, K, four kernel entries."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["T", "K", "K11", "K12", "K21", "K22"])
        for (T, K) in sorted(kernel.blocks):
            v = kernel.blocks[(T, K)]
            writer.writerow([T, K,
                             *(f"{v[r, c]:.16e}" for r in range(2) for c in range(2))])
