# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled nearest-neighbor kernel for point-set distances.

`min_sqdist` must stay bit-equivalent to the numpy fallback in
`_kernels_np`: identical per-pair arithmetic (dx*dx + dy*dy + dz*dz,
left to right) and an exact min reduction.
"""

import numpy as np

BACKEND = "compiled"


def min_sqdist(double[:, ::1] a, double[:, ::1] b):
    """For each point of `a`, the squared distance to its nearest point of `b`.

    a: (N, 3) C-contiguous float64, b: (M, 3) likewise. Returns (N,) float64.
    """
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t m = b.shape[0]
    cdef Py_ssize_t i, j
    cdef double dx, dy, dz, d, best
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] ov = out
    for i in range(n):
        best = 1e300
        for j in range(m):
            dx = a[i, 0] - b[j, 0]
            dy = a[i, 1] - b[j, 1]
            dz = a[i, 2] - b[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < best:
                best = d
        ov[i] = best
    return out
