"""Structured triangulations of the unit square.

Meshes are built from an n-by-n grid of cells, each split along its
lower-left to upper-right diagonal, and refined by red (1-to-4) refinement so
that coarse P1 spaces embed exactly into fine ones.  Element and vertex ids
are assigned row-major and never reordered, which keeps every downstream
computation bit-reproducible.  A TriMesh is immutable after construction; all
queries are read-only and safe to share across threads.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from ._kernels import tri_geometry

__all__ = [
    "TriMesh",
    "Patch",
    "PeriodicMap",
    "MeshStructureError",
    "build_uniform_mesh",
    "refine_uniform",
    "element_patch",
    "grow_patch",
    "interior_faces",
    "periodic_identify",
]


class MeshStructureError(RuntimeError):
    """Raised when a mesh violates conformity or structural expectations."""


class TriMesh:
    """Conforming triangulation with element/vertex/face connectivity.

    Attributes:
        vertices: (nv, 2) float array of coordinates in [0, 1]^2.
        elements: (nt, 3) int array of vertex indices, counterclockwise.
        parent_of: (nt,) int array mapping elements to the coarse mesh this
            mesh was refined from, or None for a root mesh.
        areas, basis_grads: per-element area and P1 nodal basis gradients.
        boundary_vertex_flags: (nv,) bool array.
        mesh_size_H: maximal element diameter.
    """

    def __init__(self, vertices, elements, parent_of=None):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.elements = np.ascontiguousarray(elements, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise MeshStructureError("vertices must be (nv, 2)")
        if self.elements.ndim != 2 or self.elements.shape[1] != 3:
            raise MeshStructureError("elements must be (nt, 3)")
        self.parent_of = None if parent_of is None else np.asarray(parent_of, dtype=np.int64)

        areas, grads = tri_geometry(self.vertices, self.elements)
        if np.any(areas <= 0.0):
            bad = int(np.argmin(areas))
            raise MeshStructureError(f"element {bad} has non-positive signed area")
        self.areas = areas
        self.basis_grads = grads

        self._edge_census()
        edge_vec = self.vertices[self.elements] - self.vertices[np.roll(self.elements, -1, axis=1)]
        self.mesh_size_H = float(np.sqrt((edge_vec ** 2).sum(axis=2).max()))

    def _edge_census(self):
        elems = self.elements
        raw = np.concatenate([elems[:, [0, 1]], elems[:, [1, 2]], elems[:, [2, 0]]])
        owners = np.tile(np.arange(elems.shape[0], dtype=np.int64), 3)
        raw.sort(axis=1)
        order = np.lexsort((raw[:, 1], raw[:, 0]))
        raw, owners = raw[order], owners[order]
        uniq, start, counts = np.unique(raw, axis=0, return_index=True, return_counts=True)
        if np.any(counts > 2):
            raise MeshStructureError("non-conforming mesh: an edge is shared by >2 elements")
        self._edges = uniq
        boundary = counts == 1
        nv = self.vertices.shape[0]
        flags = np.zeros(nv, dtype=bool)
        flags[uniq[boundary].ravel()] = True
        self.boundary_vertex_flags = flags
        # interior faces, adjacent element pair ordered by ascending element id
        inner = ~boundary
        e_plus = owners[start[inner]]
        e_minus = owners[start[inner] + 1]
        lo = np.minimum(e_plus, e_minus)
        hi = np.maximum(e_plus, e_minus)
        self._interior_faces = np.column_stack([uniq[inner], lo, hi])

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_elements(self):
        return self.elements.shape[0]

    @property
    def faces(self):
        """Interior faces as (nf, 4) rows [v0, v1, element_plus, element_minus]."""
        return self._interior_faces

    @cached_property
    def barycenters(self):
        return self.vertices[self.elements].mean(axis=1)

    @cached_property
    def vertex_elements(self):
        """CSR-style vertex-to-element adjacency (indptr, element ids)."""
        flat = self.elements.ravel()
        owners = np.repeat(np.arange(self.n_elements, dtype=np.int64), 3)
        order = np.argsort(flat, kind="stable")
        counts = np.bincount(flat, minlength=self.n_vertices)
        indptr = np.concatenate([[0], np.cumsum(counts)])
        return indptr, owners[order]

    def elements_of_vertex(self, v):
        indptr, owners = self.vertex_elements
        return owners[indptr[v]:indptr[v + 1]]

    def signature(self):
        """Short structural descriptor used for cache keys."""
        return (self.n_vertices, self.n_elements, float(self.mesh_size_H))


@dataclass
class Patch:
    """Element patch N^m(T) around a center element."""

    center_element: int
    order_m: int
    elements: np.ndarray
    interior_fine_vertex_ids: np.ndarray | None = None


@dataclass
class PeriodicMap:
    """Identification of opposite-boundary vertices of a tensor-structured mesh."""

    vertex_class: np.ndarray
    mean_constraint: bool = True

    @property
    def n_classes(self):
        return int(np.unique(self.vertex_class).size)


def build_uniform_mesh(n):
    """Uniform n-by-n triangulation of the unit square (2 triangles per cell).

    Cells are split along the lower-left to upper-right diagonal; ids are
    row-major.  The mesh size is sqrt(2)/n.
    """
    if n < 1:
        raise ValueError(f"invalid mesh size n={n}; need n >= 1")
    n = int(n)
    xs = np.arange(n + 1) / n
    X, Y = np.meshgrid(xs, xs, indexing="xy")
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    iy, ix = np.divmod(np.arange(n * n), n)
    ll = iy * (n + 1) + ix
    lr = ll + 1
    ul = ll + (n + 1)
    ur = ul + 1
    elements = np.empty((2 * n * n, 3), dtype=np.int64)
    elements[0::2] = np.column_stack([ll, lr, ur])
    elements[1::2] = np.column_stack([ll, ur, ul])
    return TriMesh(vertices, elements)


def _refine_once(mesh):
    nv, nt = mesh.n_vertices, mesh.n_elements
    elems = mesh.elements
    raw = np.concatenate([elems[:, [0, 1]], elems[:, [1, 2]], elems[:, [2, 0]]])
    raw.sort(axis=1)
    edges, inverse = np.unique(raw, axis=0, return_inverse=True)
    mid_ids = nv + np.arange(edges.shape[0], dtype=np.int64)
    midpoints = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
    vertices = np.vstack([mesh.vertices, midpoints])

    m01 = mid_ids[inverse[:nt]]
    m12 = mid_ids[inverse[nt:2 * nt]]
    m02 = mid_ids[inverse[2 * nt:]]
    v0, v1, v2 = elems[:, 0], elems[:, 1], elems[:, 2]
    children = np.empty((4 * nt, 3), dtype=np.int64)
    children[0::4] = np.column_stack([v0, m01, m02])
    children[1::4] = np.column_stack([m01, v1, m12])
    children[2::4] = np.column_stack([m02, m12, v2])
    children[3::4] = np.column_stack([m01, m12, m02])
    parent = np.repeat(np.arange(nt, dtype=np.int64), 4)
    return vertices, children, parent


def refine_uniform(mesh, levels):
    """Red-refine `levels` times; parent_of chains back to the input mesh."""
    if levels < 0:
        raise ValueError(f"invalid refinement level count {levels}")
    parent = np.arange(mesh.n_elements, dtype=np.int64)
    current = mesh
    for _ in range(int(levels)):
        vertices, children, step_parent = _refine_once(current)
        parent = parent[step_parent]
        current = TriMesh(vertices, children, parent_of=parent)
    if current is mesh:
        current = TriMesh(mesh.vertices, mesh.elements, parent_of=parent)
    return current


def grow_patch(mesh, element_ids, m, periodic=None):
    """m rounds of vertex-sharing closure growth of an element id set."""
    in_patch = np.zeros(mesh.n_elements, dtype=bool)
    in_patch[np.asarray(element_ids, dtype=np.int64)] = True
    rep = None if periodic is None else periodic.vertex_class
    for _ in range(int(m)):
        vmask = np.zeros(mesh.n_vertices, dtype=bool)
        vmask[mesh.elements[in_patch].ravel()] = True
        if rep is not None:
            cmask = np.zeros(mesh.n_vertices, dtype=bool)
            cmask[rep[vmask]] = True
            vmask = cmask[rep]
        in_patch |= vmask[mesh.elements].any(axis=1)
    return np.flatnonzero(in_patch)


def element_patch(mesh, element, m, periodic=None):
    """Patch N^m(T) of an element, optionally with torus (periodic) adjacency."""
    if not 0 <= element < mesh.n_elements:
        raise IndexError(f"invalid element id {element}")
    if m < 0:
        raise ValueError(f"invalid patch order {m}")
    ids = grow_patch(mesh, [element], m, periodic=periodic)
    return Patch(center_element=int(element), order_m=int(m), elements=ids)


def interior_faces(mesh):
    """All interior faces with their (element_plus, element_minus) pairs."""
    return mesh.faces


def periodic_identify(mesh):
    """Identify opposite-boundary vertices of a tensor-structured mesh.

    Vertices on x=1 (resp. y=1) map to their partners on x=0 (resp. y=0);
    the four corners collapse to a single class.  Raises MeshStructureError
    when a boundary vertex has no geometric partner.
    """
    verts = mesh.vertices
    nv = mesh.n_vertices
    tol = 1e-12

    target = verts.copy()
    on_x1 = np.abs(verts[:, 0] - 1.0) <= tol
    on_y1 = np.abs(verts[:, 1] - 1.0) <= tol
    target[on_x1, 0] = 0.0
    target[on_y1, 1] = 0.0

    lookup = {}
    for v in np.flatnonzero(mesh.boundary_vertex_flags):
        key = (round(float(verts[v, 0]), 12), round(float(verts[v, 1]), 12))
        lookup[key] = min(lookup.get(key, v), int(v))

    vertex_class = np.arange(nv, dtype=np.int64)
    movers = np.flatnonzero(on_x1 | on_y1)
    for v in movers:
        key = (round(float(target[v, 0]), 12), round(float(target[v, 1]), 12))
        if key not in lookup:
            raise MeshStructureError(
                f"boundary vertex {int(v)} at {verts[v]} has no periodic partner")
        vertex_class[v] = lookup[key]
    # one more pass collapses chains like (1,1) -> (0,1) -> (0,0)
    vertex_class = vertex_class[vertex_class]
    return PeriodicMap(vertex_class=vertex_class)
