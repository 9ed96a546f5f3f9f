"""Time the numba kernels against the numpy fallback.

    python benchmarks/bench_kernels.py --points 20000 --queries 2000 --repeat 5

Both backends run in the same process; the numba one is compiled (or loaded
from cache) before timing starts. Results are checked for equality.
"""

import argparse
import time

import numpy as np

from graspvoc import _kernels


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--points", type=int, default=20000)
    ap.add_argument("--queries", type=int, default=2000)
    ap.add_argument("--resolution", type=int, default=512)
    ap.add_argument("--radius", type=int, default=2)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    if _kernels.numba_impl is None:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(args.seed)
    pts = rng.normal(size=(args.points, 3))
    q = rng.normal(size=(args.queries, 3))
    res = args.resolution
    cols = rng.integers(0, res, args.points)
    rows = rng.integers(0, res, args.points)
    depth = rng.normal(size=args.points)

    cases = {
        "nearest": lambda impl: impl.nearest(q, pts),
        "raster": lambda impl: impl.raster(cols, rows, depth, res, res, args.radius, 0.6, 0.0),
    }
    print(f"{'kernel':<10}{'numpy [s]':>12}{'numba [s]':>12}{'speedup':>10}")
    for name, call in cases.items():
        call(_kernels.numba_impl)  # compile
        t_np, out_np = best_of(lambda: call(_kernels.numpy_impl), args.repeat)
        t_nb, out_nb = best_of(lambda: call(_kernels.numba_impl), args.repeat)
        same = all(np.array_equal(a, b) for a, b in zip(out_np, out_nb))
        flag = "" if same else "  MISMATCH"
        print(f"{name:<10}{t_np:>12.4f}{t_nb:>12.4f}{t_np / t_nb:>9.1f}x{flag}")


if __name__ == "__main__":
    main()
