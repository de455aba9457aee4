"""Pure-numpy fallback for the nearest-neighbor kernel.

Kept bit-equivalent to the compiled kernel: squared distances are formed
as (dx*dx + dy*dy + dz*dz) in the same order, and min is an exact
reduction, so both backends return identical bytes for identical inputs.
"""

import numpy as np

BACKEND = "numpy"

_CHUNK = 256  # rows of `a` per block, caps the (chunk, M, 3) temporary


def min_sqdist(a, b):
    """For each point of `a`, the squared distance to its nearest point of `b`.

    a: (N, 3) float64, b: (M, 3) float64. Returns (N,) float64.
    """
    n = a.shape[0]
    out = np.empty(n, dtype=np.float64)
    for start in range(0, n, _CHUNK):
        block = a[start : start + _CHUNK]
        diff = block[:, None, :] - b[None, :, :]
        out[start : start + _CHUNK] = (diff * diff).sum(axis=2).min(axis=1)
    return out
