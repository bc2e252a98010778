"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py --size 128 --repeat 5
"""
import argparse
import time

import numpy as np

from sua import kernels


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--size", type=int, default=128)
    parser.add_argument("--gamma", type=float, default=0.35)
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    gen = np.random.default_rng(args.seed)
    n = args.size
    img = gen.random((n, n))
    stack = gen.random((2, n, n))
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    x = xx + gen.normal(0, 2, (n, n))
    y = yy + gen.normal(0, 2, (n, n))

    backends = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])
    print(f"active backend: {kernels.BACKEND}; image {n}x{n}, best of {args.repeat}")
    rows = {}
    for b in backends:
        rows[b] = (
            best_of(lambda: kernels.potts_rows(img, args.gamma, backend=b), args.repeat),
            best_of(lambda: kernels.bilinear_sample(stack, x, y, backend=b), args.repeat),
        )
    print(f"{'backend':<8} {'potts_rows [ms]':>16} {'bilinear [ms]':>14}")
    for b, (tp, tb) in rows.items():
        print(f"{b:<8} {1e3 * tp:16.2f} {1e3 * tb:14.2f}")
    if len(rows) == 2:
        (pp, pb), (cp, cb) = rows["python"], rows["cython"]
        print(f"speedup  {pp / cp:15.1f}x {pb / cb:13.1f}x")


if __name__ == "__main__":
    main()
