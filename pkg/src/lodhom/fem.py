"""P1 finite-element machinery on TriMesh.

Assembly is exact for coefficients that are constant per element (no
quadrature), boundary conditions are imposed by eliminating Dirichlet dofs
before finalization, and the quasi-interpolation used throughout is the
composition of the per-element L2 projection onto discontinuous P1 with
arithmetic vertex averaging.  All assembled operators are immutable
scipy.sparse matrices; factorizations are read-only after construction and
can be shared across threads.
"""

import hashlib

import numpy as np
import scipy.linalg
import scipy.sparse as sparse
import scipy.sparse.linalg as spla

from ._kernels import stiffness_values
from .geometry import MeshStructureError, periodic_identify

__all__ = [
    "CoefficientField",
    "FeSpace",
    "SolverError",
    "assemble_stiffness",
    "assemble_mass",
    "stiffness_matrix",
    "mass_matrix",
    "corrector_load_vertexwise",
    "assemble_corrector_load",
    "quasi_interpolation_matrix",
    "quasi_interpolation_vertexwise",
    "prolongation",
    "prolongation_vertexwise",
    "solve_spd",
    "solve_mean_constrained",
    "solve_saddle",
    "saddle_solver",
    "check_nested",
]

DEFAULT_SOLVER_TOL = 1e-10

_LOCAL_MASS = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


class SolverError(RuntimeError):
    """Raised when a linear solve fails to meet its tolerance contract."""


def _sym_eig_bounds(values):
    # closed-form eigenvalues of symmetric 2x2 matrices
    a, b, d = values[:, 0, 0], values[:, 0, 1], values[:, 1, 1]
    mean = 0.5 * (a + d)
    rad = np.sqrt((0.5 * (a - d)) ** 2 + b ** 2)
    return float((mean - rad).min()), float((mean + rad).max())


class CoefficientField:
    """Symmetric 2x2 diffusion tensor sampled per (fine) element.

    Scalar input arrays are promoted to multiples of the identity.  The
    spectral bounds alpha, beta are cached and must satisfy 0 < alpha.
    """

    def __init__(self, mesh, values):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 1:
            full = np.zeros((values.shape[0], 2, 2))
            full[:, 0, 0] = values
            full[:, 1, 1] = values
            values = full
        if values.shape != (mesh.n_elements, 2, 2):
            raise ValueError(
                f"coefficient shape {values.shape} does not match mesh with "
                f"{mesh.n_elements} elements")
        asym = np.abs(values[:, 0, 1] - values[:, 1, 0]).max()
        scale = max(np.abs(values).max(), 1.0)
        if asym > 1e-12 * scale:
            raise ValueError(f"coefficient matrices not symmetric (max dev {asym:g})")
        values = 0.5 * (values + values.transpose(0, 2, 1))
        self.mesh = mesh
        self.values = values
        self.alpha, self.beta = _sym_eig_bounds(values)
        if self.alpha <= 0.0:
            raise ValueError(f"coefficient not uniformly elliptic (alpha={self.alpha:g})")

    @property
    def fingerprint(self):
        h = hashlib.sha256()
        h.update(np.asarray(self.mesh.signature(), dtype=np.float64).tobytes())
        h.update(self.values.tobytes())
        return h.hexdigest()


class FeSpace:
    """P1 space on a TriMesh: zero-trace (dirichlet) or periodic mean-free.

    dof_map sends vertices to dof ids (-1 marks eliminated Dirichlet
    vertices).  E expands dof vectors to vertex values; R restricts vertex
    values to dofs by picking the representative vertex.
    """

    def __init__(self, mesh, kind, periodic_map=None):
        if kind not in ("dirichlet", "periodic_meanfree"):
            raise ValueError(f"unknown space kind {kind!r}")
        self.mesh = mesh
        self.kind = kind
        nv = mesh.n_vertices
        if kind == "dirichlet":
            free = ~mesh.boundary_vertex_flags
            dof_map = np.full(nv, -1, dtype=np.int64)
            dof_map[free] = np.arange(int(free.sum()))
            self.periodic_map = None
        else:
            if periodic_map is None:
                periodic_map = periodic_identify(mesh)
            rep = periodic_map.vertex_class
            reps, dof_of_rep = np.unique(rep, return_inverse=True)
            dof_map = dof_of_rep.astype(np.int64)
            self.periodic_map = periodic_map
            self._rep_vertices = reps
        self.dof_map = dof_map
        self.dof_count = int(dof_map.max()) + 1

        rows = np.flatnonzero(dof_map >= 0)
        cols = dof_map[rows]
        self.E = sparse.csr_matrix(
            (np.ones(rows.size), (rows, cols)), shape=(nv, self.dof_count))
        if kind == "dirichlet":
            rep_rows = rows
        else:
            rep_rows = self._rep_vertices
        self.R = sparse.csr_matrix(
            (np.ones(rep_rows.size), (dof_map[rep_rows], rep_rows)),
            shape=(self.dof_count, nv))

    @property
    def ndof(self):
        return self.dof_count

    def extend(self, u):
        return self.E @ u

    def restrict(self, v):
        return self.R @ v

    def mean_vector(self):
        """Dof-level functional v -> integral of v over the domain."""
        return self.E.T @ (mass_matrix(self.mesh) @ np.ones(self.mesh.n_vertices))

    def remove_mean(self, u):
        if self.kind != "periodic_meanfree":
            return u
        m = self.mean_vector()
        vol = float(m.sum())
        return u - (m @ u) / vol


# ---------------------------------------------------------------------------
# vertex-level assembly


def _coo_from_local(elements, vals, nv):
    rows = np.repeat(elements, 3, axis=1).ravel()
    cols = np.tile(elements, (1, 3)).ravel()
    op = sparse.csr_matrix((vals.ravel(), (rows, cols)), shape=(nv, nv))
    op.sum_duplicates()
    return op


def stiffness_from_values(mesh, tensor_values):
    """Vertex-level stiffness for raw (possibly nonsymmetric) tensor values."""
    vals = stiffness_values(mesh.basis_grads, mesh.areas,
                            np.ascontiguousarray(tensor_values))
    return _coo_from_local(mesh.elements, vals, mesh.n_vertices)


def stiffness_matrix(mesh, coeff):
    """Vertex-level stiffness for a per-element 2x2 tensor field (exact)."""
    if coeff.mesh is not mesh and coeff.mesh.signature() != mesh.signature():
        raise ValueError("coefficient is sampled on a different mesh")
    return stiffness_from_values(mesh, coeff.values)


def mass_matrix(mesh):
    """Vertex-level P1 mass matrix (exact); entries sum to the domain area."""
    vals = mesh.areas[:, None, None] * _LOCAL_MASS[None, :, :]
    return _coo_from_local(mesh.elements, vals, mesh.n_vertices)


def assemble_stiffness(space, coeff):
    """Space-level stiffness: SPD for dirichlet, PSD (constants) for periodic."""
    S = stiffness_matrix(space.mesh, coeff)
    return (space.E.T @ S @ space.E).tocsr()


def assemble_mass(space):
    S = mass_matrix(space.mesh)
    return (space.E.T @ S @ space.E).tocsr()


def corrector_load_vertexwise(fine_mesh, coeff, fine_element_ids, direction_j):
    """Vertex-level load v -> integral over the given elements of grad(v).(A e_j)."""
    if direction_j not in (0, 1):
        raise ValueError("direction_j must be 0 or 1")
    sub = np.asarray(fine_element_ids, dtype=np.int64)
    flux = coeff.values[sub, :, direction_j]          # A e_j per element
    w = fine_mesh.areas[sub, None] * np.einsum(
        "tid,td->ti", fine_mesh.basis_grads[sub], flux)
    load = np.zeros(fine_mesh.n_vertices)
    np.add.at(load, fine_mesh.elements[sub].ravel(), w.ravel())
    return load


def assemble_corrector_load(fine_space, coeff, coarse_T, direction_j):
    """Space-level corrector right-hand side for coarse element T, direction j."""
    mesh = fine_space.mesh
    if mesh.parent_of is None:
        raise MeshStructureError("fine mesh has no parent map; refine from the coarse mesh")
    sub = np.flatnonzero(mesh.parent_of == coarse_T)
    full = corrector_load_vertexwise(mesh, coeff, sub, direction_j)
    return fine_space.E.T @ full


def fine_elements_by_parent(fine_mesh, n_coarse_elements):
    """List of fine-element id arrays grouped by coarse parent."""
    if fine_mesh.parent_of is None:
        raise MeshStructureError("fine mesh has no parent map")
    parent = fine_mesh.parent_of
    order = np.argsort(parent, kind="stable")
    counts = np.bincount(parent, minlength=n_coarse_elements)
    indptr = np.concatenate([[0], np.cumsum(counts)])
    return [order[indptr[k]:indptr[k + 1]] for k in range(n_coarse_elements)]


def check_nested(coarse_mesh, fine_mesh):
    """Validate that fine_mesh is a red-refinement product of coarse_mesh."""
    if fine_mesh is coarse_mesh:
        return
    if fine_mesh.parent_of is None:
        raise MeshStructureError("meshes not nested: fine mesh lacks a parent map")
    nvc = coarse_mesh.n_vertices
    if fine_mesh.n_vertices < nvc or fine_mesh.parent_of.max() >= coarse_mesh.n_elements:
        raise MeshStructureError("meshes not nested: parent map out of range")
    if not np.array_equal(fine_mesh.vertices[:nvc], coarse_mesh.vertices):
        raise MeshStructureError("meshes not nested: coarse vertices not preserved")


# ---------------------------------------------------------------------------
# transfer operators


def prolongation_vertexwise(coarse_mesh, fine_mesh):
    """Exact nodal interpolation of coarse P1 functions on fine vertices."""
    check_nested(coarse_mesh, fine_mesh)
    if fine_mesh is coarse_mesh:
        return sparse.identity(coarse_mesh.n_vertices, format="csr")
    # any fine element containing the vertex locates it inside its coarse parent
    owner = np.empty(fine_mesh.n_vertices, dtype=np.int64)
    for local in range(3):
        owner[fine_mesh.elements[:, local]] = np.arange(fine_mesh.n_elements)
    K = fine_mesh.parent_of[owner]
    corners = coarse_mesh.elements[K]
    grads = coarse_mesh.basis_grads[K]                       # (nv_f, 3, 2)
    anchor = coarse_mesh.vertices[corners[:, 0]]
    delta = fine_mesh.vertices - anchor
    lam = np.einsum("vid,vd->vi", grads, delta)
    lam[:, 0] += 1.0                                         # lambda_0(anchor) = 1
    lam[np.abs(lam) < 1e-13] = 0.0
    rows = np.repeat(np.arange(fine_mesh.n_vertices), 3)
    P = sparse.csr_matrix(
        (lam.ravel(), (rows, corners.ravel())),
        shape=(fine_mesh.n_vertices, coarse_mesh.n_vertices))
    P.eliminate_zeros()
    P.sum_duplicates()
    return P


def prolongation(coarse_space, fine_space):
    """Space-level embedding of the coarse space into the fine one."""
    P = prolongation_vertexwise(coarse_space.mesh, fine_space.mesh)
    return (fine_space.R @ P @ coarse_space.E).tocsr()


def quasi_interpolation_vertexwise(coarse_space, fine_mesh):
    """Quasi-interpolation rows over fine-vertex columns.

    Per coarse element the fine function is L2-projected onto affine
    functions (exact 3x3 local mass solve against exactly integrated
    fine-coarse products); the resulting corner values are averaged
    arithmetically over the elements adjacent to each free vertex/class.
    """
    coarse_mesh = coarse_space.mesh
    check_nested(coarse_mesh, fine_mesh)
    ntc, nvf = coarse_mesh.n_elements, fine_mesh.n_vertices

    if fine_mesh is coarse_mesh:
        parent = np.arange(ntc, dtype=np.int64)
    else:
        parent = fine_mesh.parent_of
    corners = coarse_mesh.elements[parent]                   # (ntf, 3)
    grads = coarse_mesh.basis_grads[parent]
    fine_verts = fine_mesh.vertices[fine_mesh.elements]      # (ntf, 3, 2)
    anchor = coarse_mesh.vertices[corners[:, 0]][:, None, :]
    lam = np.einsum("tid,tld->til", grads, fine_verts - anchor)
    lam[:, 0, :] += 1.0                                      # (ntf, 3coarse, 3local)

    # B[3T+i, fine vertex l'] = integral over T of lambda_i * phi_l'
    w = fine_mesh.areas[:, None, None] / 12.0 * (lam + lam.sum(axis=2, keepdims=True))
    rows = (3 * parent[:, None, None] + np.arange(3)[None, :, None])
    rows = np.broadcast_to(rows, w.shape).ravel()
    cols = np.broadcast_to(fine_mesh.elements[:, None, :], w.shape).ravel()
    B = sparse.csr_matrix((w.ravel(), (rows, cols)), shape=(3 * ntc, nvf))
    B.sum_duplicates()

    # block-diagonal inverse of the local 3x3 mass matrices
    inv = 12.0 * (np.eye(3) - 0.25) / coarse_mesh.areas[:, None, None]
    brows = np.repeat(3 * np.arange(ntc), 9) + np.tile(np.repeat(np.arange(3), 3), ntc)
    bcols = np.repeat(3 * np.arange(ntc), 9) + np.tile(np.tile(np.arange(3), 3), ntc)
    Minv = sparse.csr_matrix((inv.ravel(), (brows, bcols)), shape=(3 * ntc, 3 * ntc))
    C = Minv @ B                                             # corner values of Pi_H

    # arithmetic vertex averaging over adjacent elements, per free dof/class
    dof = coarse_space.dof_map[coarse_mesh.elements]         # (ntc, 3)
    keep = dof.ravel() >= 0
    arows = dof.ravel()[keep]
    acols = (3 * np.arange(ntc, dtype=np.int64)[:, None] + np.arange(3)).ravel()[keep]
    deg = np.bincount(arows, minlength=coarse_space.ndof).astype(np.float64)
    Avg = sparse.csr_matrix(
        (1.0 / deg[arows], (arows, acols)), shape=(coarse_space.ndof, 3 * ntc))
    return (Avg @ C).tocsr()


def quasi_interpolation_matrix(coarse_space, fine_space):
    """I_H as a sparse map from fine dof vectors to coarse dof vectors."""
    IH = quasi_interpolation_vertexwise(coarse_space, fine_space.mesh)
    return (IH @ fine_space.E).tocsr()


# ---------------------------------------------------------------------------
# solvers


def solve_spd(op, rhs, tol=DEFAULT_SOLVER_TOL):
    """Direct sparse solve of an SPD system with a residual guarantee."""
    if not 0.0 < tol <= 1e-6:
        raise ValueError("tol must lie in (0, 1e-6]")
    try:
        lu = spla.splu(sparse.csc_matrix(op))
    except RuntimeError as exc:
        raise SolverError(f"SPD factorization failed: {exc}") from exc
    u = lu.solve(rhs)
    if not np.all(np.isfinite(u)):
        raise SolverError("SPD solve produced non-finite values")
    res = np.linalg.norm(op @ u - rhs)
    ref = max(np.linalg.norm(rhs), 1e-300)
    if res / ref > tol:
        raise SolverError(f"SPD solve residual {res / ref:.3e} exceeds tol {tol:g}")
    return u


def solve_mean_constrained(op, rhs, mean_vec, tol=DEFAULT_SOLVER_TOL):
    """Solve a PSD system with the constant nullspace pinned by a mean row."""
    n = op.shape[0]
    c = sparse.csr_matrix(mean_vec.reshape(1, n))
    kkt = sparse.bmat([[op, c.T], [c, None]], format="csc")
    lu = spla.splu(kkt)
    aug = np.concatenate([rhs, [0.0]])
    sol = lu.solve(aug)
    u = sol[:n]
    res = np.linalg.norm(op @ u + mean_vec * sol[n] - rhs)
    ref = max(np.linalg.norm(rhs), 1e-300)
    if res / ref > tol:
        raise SolverError(f"constrained solve residual {res / ref:.3e} exceeds {tol:g}")
    return u


def _prune_constraints(constraints, rank_tol=1e-10):
    C = sparse.csr_matrix(constraints)
    norms = np.sqrt(np.asarray(C.multiply(C).sum(axis=1)).ravel())
    nonzero = np.flatnonzero(norms > 0.0)
    if nonzero.size == 0:
        return C[:0], np.arange(C.shape[0])
    C = C[nonzero]
    R = scipy.linalg.qr(C.T.toarray(), mode="r", pivoting=True)
    r_mat, piv = R[0], R[1]
    diag = np.abs(np.diag(r_mat))
    rank = int((diag > rank_tol * diag[0]).sum()) if diag.size else 0
    keep = np.sort(piv[:rank])
    dropped_local = np.setdiff1d(np.arange(C.shape[0]), keep)
    dropped = np.concatenate([
        np.setdiff1d(np.arange(constraints.shape[0]), nonzero),
        nonzero[dropped_local],
    ])
    return C[keep], np.sort(dropped)


class saddle_solver:
    """Factorized saddle-point system [op, C^T; C, 0] for repeated solves."""

    def __init__(self, op, constraints, tol=DEFAULT_SOLVER_TOL):
        self.op = sparse.csr_matrix(op)
        self.constraints = sparse.csr_matrix(constraints)
        self.tol = tol
        self.C, self.pruned_rows = _prune_constraints(self.constraints)
        self.n = op.shape[0]
        self.m = self.C.shape[0]
        if self.m == 0:
            kkt = sparse.csc_matrix(self.op)
        else:
            kkt = sparse.bmat([[self.op, self.C.T], [self.C, None]], format="csc")
        try:
            self.lu = spla.splu(kkt)
        except RuntimeError as exc:
            raise MeshStructureError(
                f"saddle system singular after pruning constraint rows "
                f"{self.pruned_rows.tolist()}: {exc}") from exc

    def solve(self, rhs):
        sol = self.lu.solve(np.concatenate([rhs, np.zeros(self.m)]))
        q = sol[:self.n]
        if not np.all(np.isfinite(q)):
            raise MeshStructureError(
                f"saddle system singular after pruning constraint rows "
                f"{self.pruned_rows.tolist()}")
        if self.constraints.shape[0]:
            cres = np.abs(self.constraints @ q).max()
            if cres > 1e-10 * max(1.0, np.abs(q).max()):
                raise SolverError(f"constraint residual {cres:.3e} exceeds 1e-10")
        resvec = self.op @ q - rhs
        if self.m:
            resvec = resvec + self.C.T @ sol[self.n:]
        rres = np.linalg.norm(resvec) / max(np.linalg.norm(rhs), 1e-300)
        if rres > self.tol:
            raise SolverError(f"saddle solve residual {rres:.3e} exceeds tol {self.tol:g}")
        return q


def solve_saddle(op, constraints, rhs, tol=DEFAULT_SOLVER_TOL):
    """Solve op q + C^T lambda = rhs, C q = 0, with redundant-row pruning."""
    return saddle_solver(op, constraints, tol=tol).solve(rhs)
