"""Numba vs numpy timings for the kernels in ``auditvotes.kernels``.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--n 4000]

Each kernel is called once per backend before timing so numba compilation is
excluded.  Reports the best of ``--repeat`` runs in milliseconds.
"""
import argparse
import timeit

import numpy as np

from auditvotes import kernels
from auditvotes.graph import generate_sbm


def cases(n: int, rng: np.random.Generator):
    g = generate_sbm(3, n // 3, 10.0 / n, 1.0 / n, 16, 0.8, seed=0)
    e = g.edges
    adj = g.adjacency
    h = rng.standard_normal((g.n, 64))
    upper = g.n * (g.n - 1) // 2
    draws = rng.integers(0, upper, 20 * g.num_edges)
    cand = rng.choice(upper, 50 * g.num_edges, replace=False).astype(np.int64)
    cscores = -np.sort(-rng.random(cand.shape[0]))
    classes = rng.integers(0, 6, g.n)
    passed = rng.random(g.n) < 0.7
    counts = np.zeros((g.n, 6), np.int64)
    ps = rng.random(400)
    return {
        "first_distinct": lambda: kernels.first_distinct(draws, upper),
        "propagate": lambda: kernels.propagate(g.n, e[:, 0], e[:, 1], h),
        "top_absent": lambda: kernels.top_absent(cand, cscores, g.keys, 5 * g.num_edges),
        "neighbor_agreement": lambda: kernels.neighbor_agreement(adj.indptr, adj.indices, g.labels),
        "poisson_binomial_pmf": lambda: kernels.poisson_binomial_pmf(ps),
        "accumulate_votes": lambda: kernels.accumulate_votes(counts, classes, passed),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--n", type=int, default=4000, help="approximate node count (the SBM generator is O(n^2) in memory)")
    args = ap.parse_args()
    fns = cases(args.n, np.random.default_rng(0))
    prev = kernels.get_backend()
    print(f"{'kernel':<22}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
    try:
        for name, fn in fns.items():
            t = {}
            for backend in ("numba", "numpy"):
                kernels.set_backend(backend)
                fn()
                t[backend] = 1e3 * min(timeit.repeat(fn, number=1, repeat=args.repeat))
            print(f"{name:<22}{t['numba']:>12.3f}{t['numpy']:>12.3f}{t['numpy'] / t['numba']:>9.1f}x")
    finally:
        kernels.set_backend(prev)


if __name__ == "__main__":
    main()
