"""Localized element correctors on extended element patches.

Each coarse element T and direction j carries a fine-scale corrector living
in the kernel of the quasi-interpolation, supported on the patch N^ell(T) and
obtained from a constrained (saddle-point) fine-mesh solve.  Problems for
different (T, j) are independent; compute_all_correctors maps over them with
a thread pool, each task writing only its own output slot, so results are
bit-identical to a sequential run at any thread count.
"""

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sparse

from ._kernels import element_gradients
from .fem import (
    DEFAULT_SOLVER_TOL,
    SolverError,
    assemble_stiffness,
    check_nested,
    corrector_load_vertexwise,
    fine_elements_by_parent,
    quasi_interpolation_matrix,
    saddle_solver,
)
from .geometry import MeshStructureError, Patch, grow_patch

__all__ = [
    "CorrectorSet",
    "CorrectorContext",
    "solve_element_corrector",
    "compute_all_correctors",
    "apply_corrector",
    "corrector_matrix",
    "decay_profile",
    "MAX_GLOBAL_DOFS",
]

MAX_GLOBAL_DOFS = 20000


class CorrectorContext:
    """Shared immutable data for all corrector solves of one configuration."""

    def __init__(self, coarse_space, fine_space, coeff):
        check_nested(coarse_space.mesh, fine_space.mesh)
        if coeff.mesh is not fine_space.mesh:
            raise ValueError("coefficient must be sampled on the fine mesh")
        if coarse_space.kind != fine_space.kind:
            raise ValueError("coarse and fine spaces must share their kind")
        self.coarse_space = coarse_space
        self.fine_space = fine_space
        self.coeff = coeff
        self.coarse_mesh = coarse_space.mesh
        self.fine_mesh = fine_space.mesh
        self.S = assemble_stiffness(fine_space, coeff)
        self.IH = quasi_interpolation_matrix(coarse_space, fine_space)
        if self.fine_mesh is self.coarse_mesh:
            self.fine_by_coarse = [np.array([t]) for t in range(self.coarse_mesh.n_elements)]
        else:
            self.fine_by_coarse = fine_elements_by_parent(
                self.fine_mesh, self.coarse_mesh.n_elements)

        fm = self.fine_mesh
        V = sparse.csr_matrix(
            (np.ones(3 * fm.n_elements),
             (fm.elements.ravel(), np.repeat(np.arange(fm.n_elements), 3))),
            shape=(fm.n_vertices, fm.n_elements))
        self.dof_elem = (fine_space.E.T @ V).tocsr()
        self.dof_elem_total = np.asarray(self.dof_elem.sum(axis=1)).ravel()

        cm = self.coarse_mesh
        dof = coarse_space.dof_map[cm.elements].ravel()
        owners = np.repeat(np.arange(cm.n_elements), 3)
        keep = dof >= 0
        self.cdof_elem = sparse.csr_matrix(
            (np.ones(int(keep.sum())), (dof[keep], owners[keep])),
            shape=(coarse_space.ndof, cm.n_elements))
        self.periodic = getattr(coarse_space, "periodic_map", None)

    def patch_elements(self, T, ell):
        if ell is math.inf:
            return np.arange(self.coarse_mesh.n_elements, dtype=np.int64)
        return grow_patch(self.coarse_mesh, [T], ell, periodic=self.periodic)

    def patch(self, T, ell):
        """Patch with the interior fine dof ids populated."""
        elems = self.patch_elements(T, ell)
        order = self.coarse_mesh.n_elements if ell is math.inf else int(ell)
        return Patch(center_element=int(T), order_m=order, elements=elems,
                     interior_fine_vertex_ids=self.patch_dofs(elems))

    def patch_dofs(self, patch_elems):
        """Fine dofs interior to the patch (every incident element inside)."""
        fmask = np.zeros(self.fine_mesh.n_elements)
        for k in patch_elems:
            fmask[self.fine_by_coarse[k]] = 1.0
        counts = self.dof_elem @ fmask
        interior = (counts == self.dof_elem_total) & (self.dof_elem_total > 0)
        return np.flatnonzero(interior)

    def constraint_dofs(self, patch_elems):
        cmask = np.zeros(self.coarse_mesh.n_elements)
        cmask[patch_elems] = 1.0
        return np.flatnonzero(self.cdof_elem @ cmask > 0)

    def load(self, T, j):
        full = corrector_load_vertexwise(
            self.fine_mesh, self.coeff, self.fine_by_coarse[T], j)
        return self.fine_space.E.T @ full


@dataclass
class CorrectorSet:
    """All localized correctors of one (mesh pair, coefficient, ell) run."""

    ell: object
    coarse_space: object
    fine_space: object
    coeff: object
    fingerprint: str
    patches: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)

    @property
    def coarse_mesh(self):
        return self.coarse_space.mesh

    @property
    def fine_mesh(self):
        return self.fine_space.mesh

    def vector(self, T, j):
        idx, vals = self.data[(T, j)]
        out = np.zeros(self.fine_space.ndof)
        out[idx] = vals
        return out

    def content_hash(self):
        import hashlib
        h = hashlib.sha256()
        for key in sorted(self.data):
            idx, vals = self.data[key]
            h.update(struct.pack("<qq", *key))
            h.update(idx.astype("<i8").tobytes())
            h.update(vals.astype("<f8").tobytes())
        return h.hexdigest()

    def save(self, path):
        """Binary cache: header with dims, then sparse (index, value) pairs."""
        ntc = self.coarse_mesh.n_elements
        with open(path, "wb") as fh:
            fh.write(b"LODC\x01\x00\x00\x00")
            ell = -1 if self.ell is math.inf else int(self.ell)
            fh.write(struct.pack("<qqqq", ell, ntc, self.fine_space.ndof, len(self.data)))
            fh.write(self.fingerprint.encode("ascii"))
            for T in range(ntc):
                ids = np.asarray(self.patches[T].elements, dtype="<i8")
                fh.write(struct.pack("<q", ids.size))
                fh.write(ids.tobytes())
            for key in sorted(self.data):
                idx, vals = self.data[key]
                fh.write(struct.pack("<qqq", key[0], key[1], idx.size))
                fh.write(idx.astype("<i8").tobytes())
                fh.write(vals.astype("<f8").tobytes())

    @classmethod
    def load(cls, path, coarse_space, fine_space, coeff):
        with open(path, "rb") as fh:
            magic = fh.read(8)
            if magic != b"LODC\x01\x00\x00\x00":
                raise ValueError(f"not a corrector cache file: {path}")
            ell, ntc, ndof, ncorr = struct.unpack("<qqqq", fh.read(32))
            fingerprint = fh.read(64).decode("ascii")
            if fingerprint != coeff.fingerprint:
                raise ValueError("coefficient fingerprint mismatch for corrector cache")
            if ntc != coarse_space.mesh.n_elements or ndof != fine_space.ndof:
                raise ValueError("mesh descriptor mismatch for corrector cache")
            patches = {}
            for T in range(ntc):
                (count,) = struct.unpack("<q", fh.read(8))
                elems = np.frombuffer(fh.read(8 * count), dtype="<i8").copy()
                order = ntc if ell < 0 else ell
                patches[T] = Patch(center_element=T, order_m=order, elements=elems)
            data = {}
            for _ in range(ncorr):
                T, j, nnz = struct.unpack("<qqq", fh.read(24))
                idx = np.frombuffer(fh.read(8 * nnz), dtype="<i8").copy()
                vals = np.frombuffer(fh.read(8 * nnz), dtype="<f8").copy()
                data[(T, j)] = (idx, vals)
        return cls(ell=math.inf if ell < 0 else ell, coarse_space=coarse_space,
                   fine_space=fine_space, coeff=coeff, fingerprint=fingerprint,
                   patches=patches, data=data)


def _solve_patch(ctx, T, ell, tol, max_global_dofs):
    patch = ctx.patch_elements(T, ell)
    if ell is math.inf and ctx.fine_space.ndof > max_global_dofs:
        raise MeshStructureError(
            f"ell=infinity rejected: {ctx.fine_space.ndof} fine dofs exceed the "
            f"cap {max_global_dofs}")
    pd = ctx.patch_dofs(patch)
    if ctx.fine_mesh.n_elements == ctx.coarse_mesh.n_elements:
        # fine = coarse: every interior patch dof is constrained by its own
        # interpolation row, so the admissible space is {0} exactly
        zero = np.zeros(pd.size)
        return patch, {0: (pd.copy(), zero), 1: (pd.copy(), zero.copy())}
    if pd.size == 0:
        raise MeshStructureError(
            f"patch of element {T} has no interior fine dofs; refine the fine mesh")
    cd = ctx.constraint_dofs(patch)
    S_pp = ctx.S[pd][:, pd]
    C = ctx.IH[cd][:, pd]
    solver = saddle_solver(S_pp, C, tol=tol)
    out = {}
    for j in (0, 1):
        rhs = ctx.load(T, j)[pd]
        try:
            q = solver.solve(rhs)
        except (SolverError, MeshStructureError) as exc:
            raise SolverError(f"corrector solve failed for (T={T}, j={j}): {exc}") from exc
        out[j] = (pd.copy(), q)
    return patch, out


def solve_element_corrector(T, j, ell, coarse_space, fine_space, coeff,
                            tol=DEFAULT_SOLVER_TOL, max_global_dofs=MAX_GLOBAL_DOFS,
                            _ctx=None):
    """Solve one localized corrector problem; returns the fine dof vector."""
    ctx = _ctx or CorrectorContext(coarse_space, fine_space, coeff)
    _, out = _solve_patch(ctx, T, ell, tol, max_global_dofs)
    idx, vals = out[j]
    q = np.zeros(ctx.fine_space.ndof)
    q[idx] = vals
    return q


def compute_all_correctors(ell, coarse_space, fine_space, coeff, threads=1,
                           tol=DEFAULT_SOLVER_TOL, max_global_dofs=MAX_GLOBAL_DOFS):
    """All 2*card(T_H) localized correctors as a CorrectorSet.

    The per-element problems are independent; any thread count produces
    bit-identical results because each task owns its output slot.
    """
    ctx = CorrectorContext(coarse_space, fine_space, coeff)
    ntc = ctx.coarse_mesh.n_elements
    results = [None] * ntc

    def task(T):
        return _solve_patch(ctx, T, ell, tol, max_global_dofs)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for T, res in enumerate(pool.map(task, range(ntc))):
                results[T] = res
    else:
        for T in range(ntc):
            results[T] = task(T)

    cs = CorrectorSet(ell=ell, coarse_space=coarse_space, fine_space=fine_space,
                      coeff=coeff, fingerprint=coeff.fingerprint)
    kernel_tol = 1e-10
    for T in range(ntc):
        patch, out = results[T]
        order = ctx.coarse_mesh.n_elements if ell is math.inf else int(ell)
        cs.patches[T] = Patch(center_element=T, order_m=order, elements=patch,
                              interior_fine_vertex_ids=out[0][0])
        for j in (0, 1):
            idx, vals = out[j]
            cs.data[(T, j)] = (idx, vals)
            resid = np.abs(ctx.IH[:, idx] @ vals).max() if idx.size else 0.0
            if resid > kernel_tol:
                raise SolverError(
                    f"corrector (T={T}, j={j}) violates the interpolation kernel "
                    f"constraint: max |I_H q| = {resid:.3e}")
    return cs


def corrector_matrix(cset):
    """Sparse map Q from coarse dof vectors to corrected fine-scale parts.

    Column i holds the corrector of the i-th coarse basis function, i.e.
    the expansion sum over (T, j) of (d_j lambda_i|_T) q_{T,j}.
    """
    cspace = cset.coarse_space
    cm = cset.coarse_mesh
    dof = cspace.dof_map[cm.elements]
    rows, cols, vals = [], [], []
    for T in range(cm.n_elements):
        for j in (0, 1):
            idx, qv = cset.data[(T, j)]
            if idx.size == 0:
                continue
            for local in range(3):
                d = dof[T, local]
                if d < 0:
                    continue
                g = cm.basis_grads[T, local, j]
                if g == 0.0:
                    continue
                rows.append(idx)
                cols.append(np.full(idx.size, d, dtype=np.int64))
                vals.append(g * qv)
    if not rows:
        return sparse.csr_matrix((cset.fine_space.ndof, cspace.ndof))
    Q = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(cset.fine_space.ndof, cspace.ndof))
    Q.sum_duplicates()
    return Q


def apply_corrector(cset, v_H):
    """Corrector expansion sum over (T, j) of (d_j v_H|_T) q_{T,j}."""
    cspace = cset.coarse_space
    if v_H.shape != (cspace.ndof,):
        raise ValueError(f"coarse vector has wrong size {v_H.shape}")
    vert_vals = cspace.E @ v_H
    g = element_gradients(cset.coarse_mesh.basis_grads, cset.coarse_mesh.elements,
                          vert_vals)
    out = np.zeros(cset.fine_space.ndof)
    for T in range(cset.coarse_mesh.n_elements):
        for j in (0, 1):
            coefficient = g[T, j]
            if coefficient == 0.0:
                continue
            idx, vals = cset.data[(T, j)]
            out[idx] += coefficient * vals
    return out


def decay_profile(cset, T, j, m_max=None):
    """Energy of an idealized corrector outside growing patches N^m(T).

    Returns a list of (m, tail_energy) pairs for m = 0..m_max, where the tail
    is the coefficient-weighted energy seminorm over elements outside N^m(T);
    by default m_max is the radius at which the patch covers the whole mesh.
    """
    if cset.ell is not math.inf:
        raise ValueError("decay_profile requires idealized (ell=infinity) correctors")
    cm = cset.coarse_mesh
    fm = cset.fine_mesh
    coeff = cset.coeff
    vert = cset.fine_space.E @ cset.vector(T, j)
    grads = element_gradients(fm.basis_grads, fm.elements, vert)
    energies = fm.areas * np.einsum("td,tde,te->t", grads, coeff.values, grads)
    parent = fm.parent_of if fm.parent_of is not None else np.arange(fm.n_elements)
    periodic = getattr(cset.coarse_space, "periodic_map", None)

    profile = []
    m = 0
    while True:
        patch = grow_patch(cm, [T], m, periodic=periodic)
        inside = np.zeros(cm.n_elements, dtype=bool)
        inside[patch] = True
        tail = float(np.sqrt(max(energies[~inside[parent]].sum(), 0.0)))
        profile.append((m, tail))
        if patch.size == cm.n_elements or (m_max is not None and m >= m_max):
            break
        m += 1
    return profile
