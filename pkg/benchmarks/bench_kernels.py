"""Benchmark the compiled nearest-neighbor kernel against the numpy fallback.

Times `min_sqdist` (the hot inner loop of every chamfer evaluation) and a
full two-sided chamfer built on top of it, at several cloud sizes. Run
from the repository root:

    python3 benchmarks/bench_kernels.py [--repeats 200]

The two backends are bit-equivalent; the table reports the median time
per call and the speedup of the compiled extension.
"""

import argparse
import statistics
import time

import numpy as np

from p2v import _kernels_np

try:
    from p2v import _kernels
except ImportError:
    _kernels = None


def time_call(fn, args, repeats):
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - start)
    return statistics.median(times)


def chamfer_with(kernel, a, b):
    return kernel.min_sqdist(a, b).mean() + kernel.min_sqdist(b, a).mean()


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=200,
                        help="calls per measurement (median is reported)")
    parser.add_argument("--sizes", type=int, nargs="+",
                        default=[32, 128, 512, 1024],
                        help="cloud sizes to benchmark")
    args = parser.parse_args()

    if _kernels is None:
        print("compiled kernel not available; showing numpy fallback only")

    rng = np.random.default_rng(0)
    rows = []
    for n in args.sizes:
        a = rng.normal(size=(n, 3))
        b = rng.normal(size=(n, 3))
        for label, fn in (("min_sqdist", lambda k: k.min_sqdist(a, b)),
                          ("chamfer", lambda k: chamfer_with(k, a, b))):
            t_np = time_call(fn, (_kernels_np,), args.repeats)
            if _kernels is not None:
                t_c = time_call(fn, (_kernels,), args.repeats)
                equal = np.array_equal(fn(_kernels_np), fn(_kernels))
                rows.append((label, n, t_np, t_c, t_np / t_c, equal))
            else:
                rows.append((label, n, t_np, None, None, True))

    header = f"{'kernel':<12} {'points':>6} {'numpy':>12} {'compiled':>12} {'speedup':>8}  bit-equal"
    print(header)
    print("-" * len(header))
    for label, n, t_np, t_c, speedup, equal in rows:
        compiled = f"{t_c * 1e6:9.1f} us" if t_c is not None else f"{'-':>12}"
        factor = f"{speedup:7.1f}x" if speedup is not None else f"{'-':>8}"
        print(f"{label:<12} {n:>6} {t_np * 1e6:9.1f} us {compiled} {factor}  {equal}")


if __name__ == "__main__":
    main()
