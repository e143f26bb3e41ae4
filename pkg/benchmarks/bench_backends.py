"""Benchmark the numba kernels against their pure-numpy fallbacks.

Run:  python3 benchmarks/bench_backends.py [--repeats N]

Covers the three hot kernels (translational-embedding epoch, fused Adam
update, gradient row scatter-add) at the sizes the experiment harness uses.
The active backend for library code is chosen by KGT5LAB_BACKEND; this
script always times both implementations.
"""

import argparse
import time

import numpy as np

from kgt5lab._kernels import (HAS_NUMBA, adam_update_numba, adam_update_numpy,
                              scatter_add_rows_numba, scatter_add_rows_numpy,
                              transe_epoch_numba, transe_epoch_numpy)


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_transe(repeats):
    rng = np.random.default_rng(0)
    n_ent, n_rel, n_triples, d, k = 286, 4, 516, 32, 2
    ent = rng.normal(size=(n_ent, d))
    rel = rng.normal(size=(n_rel, d))
    heads = rng.integers(0, n_ent, n_triples).astype(np.int64)
    rels = rng.integers(0, n_rel, n_triples).astype(np.int64)
    tails = rng.integers(0, n_ent, n_triples).astype(np.int64)
    order = rng.permutation(n_triples).astype(np.int64)
    sides = rng.integers(0, 2, (n_triples, k)).astype(np.int64)
    corrupts = rng.integers(0, n_ent, (n_triples, k)).astype(np.int64)

    def run(impl):
        e, r = ent.copy(), rel.copy()
        for _ in range(10):  # 10 epochs per timing
            impl(e, r, heads, rels, tails, order, sides, corrupts, 1.0, 0.01, 64)

    rows = []
    if HAS_NUMBA:
        run(transe_epoch_numba)  # JIT warmup outside timing
        rows.append(("transe_epoch x10", "numba", timeit(lambda: run(transe_epoch_numba), repeats)))
    rows.append(("transe_epoch x10", "numpy", timeit(lambda: run(transe_epoch_numpy), repeats)))
    return rows


def bench_adam(repeats):
    rng = np.random.default_rng(1)
    sizes = [64 * 64] * 40 + [340 * 64, 64 * 340]  # experiment-model tensors
    params = [rng.normal(size=s) for s in sizes]
    grads = [rng.normal(size=s) for s in sizes]
    ms = [np.zeros(s) for s in sizes]
    vs = [np.zeros(s) for s in sizes]

    def run(impl):
        for p, g, m, v in zip(params, grads, ms, vs):
            impl(p, g, m, v, 1e-3, 0.9, 0.999, 0.1, 0.001, 1e-8, 0.0)

    rows = []
    if HAS_NUMBA:
        run(adam_update_numba)
        rows.append(("adam_update (42 tensors)", "numba", timeit(lambda: run(adam_update_numba), repeats)))
    rows.append(("adam_update (42 tensors)", "numpy", timeit(lambda: run(adam_update_numpy), repeats)))
    return rows


def bench_scatter(repeats):
    rng = np.random.default_rng(2)
    out = np.zeros((340, 64))
    ids = rng.integers(0, 340, size=2000).astype(np.int64)
    vals = rng.normal(size=(2000, 64))

    rows = []
    if HAS_NUMBA:
        scatter_add_rows_numba(out.copy(), ids, vals)
        rows.append(("scatter_add_rows (2000 rows)", "numba",
                     timeit(lambda: scatter_add_rows_numba(out.copy(), ids, vals), repeats)))
    rows.append(("scatter_add_rows (2000 rows)", "numpy",
                 timeit(lambda: scatter_add_rows_numpy(out.copy(), ids, vals), repeats)))
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    if not HAS_NUMBA:
        print("numba not importable; timing the numpy fallback only\n")
    rows = bench_transe(args.repeats) + bench_adam(args.repeats) + bench_scatter(args.repeats)
    width = max(len(r[0]) for r in rows)
    print(f"{'kernel':<{width}}  backend  best of {args.repeats} (ms)")
    for name, backend, secs in rows:
        print(f"{name:<{width}}  {backend:<7}  {secs * 1e3:10.3f}")
    print()
    for name in dict.fromkeys(r[0] for r in rows):
        pair = {b: s for n, b, s in rows if n == name}
        if len(pair) == 2:
            print(f"{name}: numba is {pair['numpy'] / pair['numba']:.1f}x faster than numpy")


if __name__ == "__main__":
    main()
