#!/usr/bin/env python3
"""Timing comparison of the numba and pure-numpy kernel lanes.

Runs each hot kernel on a large structured mesh and prints a table with both
timings and their ratio.  The same selection can be forced package-wide by
setting LODHOM_NUMBA=0 (numpy) or leaving it unset (numba when available).

Usage: python3 benchmarks/bench_kernels.py [n]
"""

import sys
import time

import numpy as np

from lodhom._kernels import IMPLEMENTATIONS
from lodhom.geometry import build_uniform_mesh


def time_call(fn, *args, repeats=5):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    n = int(sys.argv[1]) if len(sys.argv) > 1 else 512
    mesh = build_uniform_mesh(n)
    rng = np.random.default_rng(0)
    nt = mesh.n_elements
    tensors = rng.standard_normal((nt, 2, 2))
    tensors = tensors + tensors.transpose(0, 2, 1) + 4.0 * np.eye(2)
    u = rng.standard_normal(mesh.n_vertices)
    parents = (np.arange(nt) // 4).astype(np.int64)
    values = np.ascontiguousarray(tensors[:, :, 0])

    numpy_impl = IMPLEMENTATIONS["numpy"]
    numba_impl = IMPLEMENTATIONS["numba"]
    if numba_impl is None:
        print("numba lane unavailable (LODHOM_NUMBA=0 or numba missing); "
              "timing numpy only")

    areas, grads = numpy_impl["tri_geometry"](mesh.vertices, mesh.elements)
    cases = {
        "tri_geometry": (mesh.vertices, mesh.elements),
        "stiffness_values": (grads, areas, tensors),
        "element_gradients": (grads, mesh.elements, u),
        "scatter_rows": (parents, values, int(parents.max()) + 1),
    }

    print(f"mesh: n={n} ({nt} elements, {mesh.n_vertices} vertices)")
    print(f"{'kernel':<20}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>10}")
    for name, args in cases.items():
        t_np = time_call(numpy_impl[name], *args)
        if numba_impl is not None:
            numba_impl[name](*args)  # compile outside the timing
            t_nb = time_call(numba_impl[name], *args)
            print(f"{name:<20}{1e3 * t_np:>12.2f}{1e3 * t_nb:>12.2f}"
                  f"{t_np / t_nb:>10.2f}")
        else:
            print(f"{name:<20}{1e3 * t_np:>12.2f}{'-':>12}{'-':>10}")


if __name__ == "__main__":
    main()
