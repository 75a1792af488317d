"""Per-element numeric kernels with a numba fast path.

The four kernels here sit in every assembly loop of the package (element
geometry, local P1 stiffness blocks, elementwise gradients, flux scatter).
They are compiled with numba's @njit by default; setting the environment
variable ``LODHOM_NUMBA=0`` before import selects the pure-numpy
implementations instead.  Both paths produce the same values up to the last
ulp-level reassociation and are compared in the tests; the script
``benchmarks/bench_kernels.py`` times them against each other.
"""

import os

import numpy as np

__all__ = [
    "tri_geometry",
    "stiffness_values",
    "element_gradients",
    "scatter_rows",
    "numba_enabled",
    "IMPLEMENTATIONS",
]


# ---------------------------------------------------------------------------
# pure-numpy implementations

def _tri_geometry_np(vertices, elements):
    p0 = vertices[elements[:, 0]]
    e1 = vertices[elements[:, 1]] - p0
    e2 = vertices[elements[:, 2]] - p0
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    areas = 0.5 * det
    grads = np.empty((elements.shape[0], 3, 2))
    grads[:, 1, 0] = e2[:, 1] / det
    grads[:, 1, 1] = -e2[:, 0] / det
    grads[:, 2, 0] = -e1[:, 1] / det
    grads[:, 2, 1] = e1[:, 0] / det
    grads[:, 0, :] = -grads[:, 1, :] - grads[:, 2, :]
    return areas, grads


def _stiffness_values_np(grads, areas, tensors):
    vals = np.einsum("tid,tde,tje->tij", grads, tensors, grads)
    vals *= areas[:, None, None]
    return vals


def _element_gradients_np(grads, elements, u):
    return np.einsum("tid,ti->td", grads, u[elements])


def _scatter_rows_np(parents, values, n_out):
    out = np.zeros((n_out, values.shape[1]))
    for k in range(values.shape[1]):
        out[:, k] = np.bincount(parents, weights=values[:, k], minlength=n_out)
    return out


# ---------------------------------------------------------------------------
# numba implementations (same loop nests, no fastmath so results stay IEEE)

def _build_numba():
    import numba

    njit = numba.njit(cache=True)

    @njit
    def tri_geometry(vertices, elements):
        nt = elements.shape[0]
        areas = np.empty(nt)
        grads = np.empty((nt, 3, 2))
        for t in range(nt):
            a = elements[t, 0]
            b = elements[t, 1]
            c = elements[t, 2]
            e1x = vertices[b, 0] - vertices[a, 0]
            e1y = vertices[b, 1] - vertices[a, 1]
            e2x = vertices[c, 0] - vertices[a, 0]
            e2y = vertices[c, 1] - vertices[a, 1]
            det = e1x * e2y - e1y * e2x
            areas[t] = 0.5 * det
            grads[t, 1, 0] = e2y / det
            grads[t, 1, 1] = -e2x / det
            grads[t, 2, 0] = -e1y / det
            grads[t, 2, 1] = e1x / det
            grads[t, 0, 0] = -grads[t, 1, 0] - grads[t, 2, 0]
            grads[t, 0, 1] = -grads[t, 1, 1] - grads[t, 2, 1]
        return areas, grads

    @njit
    def stiffness_values(grads, areas, tensors):
        nt = grads.shape[0]
        vals = np.empty((nt, 3, 3))
        for t in range(nt):
            for i in range(3):
                agx = (tensors[t, 0, 0] * grads[t, i, 0]
                       + tensors[t, 0, 1] * grads[t, i, 1])
                agy = (tensors[t, 1, 0] * grads[t, i, 0]
                       + tensors[t, 1, 1] * grads[t, i, 1])
                for j in range(3):
                    vals[t, i, j] = areas[t] * (agx * grads[t, j, 0]
                                                + agy * grads[t, j, 1])
        return vals

    @njit
    def element_gradients(grads, elements, u):
        nt = grads.shape[0]
        out = np.zeros((nt, 2))
        for t in range(nt):
            for i in range(3):
                ui = u[elements[t, i]]
                out[t, 0] += grads[t, i, 0] * ui
                out[t, 1] += grads[t, i, 1] * ui
        return out

    @njit
    def scatter_rows(parents, values, n_out):
        out = np.zeros((n_out, values.shape[1]))
        for t in range(parents.shape[0]):
            p = parents[t]
            for k in range(values.shape[1]):
                out[p, k] += values[t, k]
        return out

    return {
        "tri_geometry": tri_geometry,
        "stiffness_values": stiffness_values,
        "element_gradients": element_gradients,
        "scatter_rows": scatter_rows,
    }


_NUMPY_IMPL = {
    "tri_geometry": _tri_geometry_np,
    "stiffness_values": _stiffness_values_np,
    "element_gradients": _element_gradients_np,
    "scatter_rows": _scatter_rows_np,
}

_flag = os.environ.get("LODHOM_NUMBA", "1").strip().lower()
_want_numba = _flag not in ("0", "false", "off", "no")

_NUMBA_IMPL = None
if _want_numba:
    try:
        _NUMBA_IMPL = _build_numba()
    except ImportError:
        _NUMBA_IMPL = None

IMPLEMENTATIONS = {"numpy": _NUMPY_IMPL, "numba": _NUMBA_IMPL}

_active = _NUMBA_IMPL if _NUMBA_IMPL is not None else _NUMPY_IMPL

tri_geometry = _active["tri_geometry"]
stiffness_values = _active["stiffness_values"]
element_gradients = _active["element_gradients"]
scatter_rows = _active["scatter_rows"]


def numba_enabled():
    """True when the numba lane is active for this process."""
    return _NUMBA_IMPL is not None
