"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--n 2000]

The first numba call of each kernel compiles it (or loads it from the
on-disk cache) and is excluded from the timings. A full tree fit with
pruning is timed at the end under each backend.
"""
import argparse
import time

import numpy as np

from subtree import kernels
from subtree.simlab import GeneratorSpec, generate
from subtree.tree import TreeConfig, grow


def make_inputs(n, m, rng):
    L, G = 2, 3
    codes = rng.integers(0, G, size=(n, m))
    z = rng.integers(0, L, size=n)
    cls = rng.integers(0, 2, size=n)
    w = np.column_stack([np.ones(n), rng.normal(size=n), rng.normal(size=n) ** 2])
    tables = rng.integers(0, 30, size=(m * L, 2, G)).astype(float)
    grid = kernels.grid_sums_np(codes, z, w, L, G)
    ys = rng.normal(size=n)
    order = np.sort(rng.normal(size=n))
    stats = np.zeros((n, L, 3))
    stats[np.arange(n), z, 0] = 1.0
    stats[np.arange(n), z, 1] = ys
    stats[np.arange(n), z, 2] = ys * ys
    boundary = np.append(np.diff(order) > 0, False)
    miss = np.zeros((L, 3))
    present = np.ones(L, dtype=bool)
    levels = rng.integers(0, 20, size=(9, L, 1)).astype(float)
    level_stats = np.concatenate([levels, rng.normal(size=(9, L, 1)) * levels,
                                  (1 + rng.random((9, L, 1))) * levels], axis=2)
    pgrid = grid.copy()
    pgrid[..., 1] = rng.poisson(np.maximum(grid[..., 0], 0) * 0.3)
    pgrid[..., 2] = np.maximum(grid[..., 0], 1) * 0.3
    return {
        "crosstab": lambda: kernels.crosstab(codes, z, cls, L, 2, G),
        "chi2_tables": lambda: kernels.chi2_tables(tables, True),
        "grid_sums": lambda: kernels.grid_sums(codes, z, w, L, G),
        "additive_ls": lambda: kernels.additive_ls(grid),
        "additive_poisson": lambda: kernels.additive_poisson(pgrid),
        "scan_ordinal": lambda: kernels.scan_ordinal(stats, boundary, miss, kernels.SSE, 10, 2, present),
        "search_subsets": lambda: kernels.search_subsets(level_stats, kernels.SSE, 10, 2, present),
    }


def best_of(func, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        func()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--n", type=int, default=2000, help="rows in the synthetic inputs")
    ap.add_argument("--m", type=int, default=20, help="predictors in the synthetic inputs")
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    if not kernels.HAVE_NUMBA:
        print("numba is disabled (SUBTREE_DISABLE_JIT) or missing; only numpy timings are shown")
    calls = make_inputs(args.n, args.m, np.random.default_rng(args.seed))
    backends = ["numba", "numpy"] if kernels.HAVE_NUMBA else ["numpy"]

    print(f"{'kernel':<18}" + "".join(f"{b + ' (ms)':>14}" for b in backends) + f"{'speed-up':>10}")
    for name, func in calls.items():
        row = []
        for b in backends:
            with kernels.use_backend(b):
                func()  # compile / warm up
                row.append(best_of(func, args.repeat) * 1e3)
        ratio = f"{row[1] / row[0]:>9.1f}x" if len(row) == 2 else ""
        print(f"{name:<18}" + "".join(f"{t:>14.3f}" for t in row) + ratio)

    data = generate(GeneratorSpec("m1", n=400, seed=args.seed))
    cfg = TreeConfig(method="gi", max_depth=3)
    row = []
    for b in backends:
        with kernels.use_backend(b):
            grow(data, cfg)
            row.append(best_of(lambda: grow(data, cfg), max(1, args.repeat // 5)) * 1e3)
    ratio = f"{row[1] / row[0]:>9.1f}x" if len(row) == 2 else ""
    print(f"{'fit gi m1 n=400':<18}" + "".join(f"{t:>14.1f}" for t in row) + ratio)


if __name__ == "__main__":
    main()
