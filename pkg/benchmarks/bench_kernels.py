"""Time the numba and numpy kernel backends side by side.

Usage: python3 benchmarks/bench_kernels.py [--sizes 200,500,1000] [--repeats 5]
"""
import argparse
import math
import timeit

import numpy as np

from resflow import _kernels


def kernel_calls(backend, n, rng):
    x, y = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
    sq = getattr(_kernels, f"sqdist_matrix_{backend}")
    nn = getattr(_kernels, f"nearest_bruteforce_{backend}")
    sk = getattr(_kernels, f"sinkhorn_log_{backend}")
    C = _kernels.sqdist_matrix_numpy(x, y)
    log_w = np.full(n, -math.log(n))
    zeros = np.zeros(n)
    return {
        "sqdist_matrix": lambda: sq(x, y),
        "nearest_bruteforce": lambda: nn(x, y),
        "sinkhorn_log (200 sweeps)": lambda: sk(C, log_w, log_w, 0.1, 200, 200, 0.0, zeros, zeros),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="200,500,1000")
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args(argv)
    backends = ["numpy"] + (["numba"] if _kernels.HAVE_NUMBA else [])
    rng = np.random.default_rng(0)
    print(f"{'kernel':28s} {'n':>6s} " + " ".join(f"{b:>12s}" for b in backends) + "   speedup")
    for n in (int(s) for s in args.sizes.split(",")):
        calls = {b: kernel_calls(b, n, rng) for b in backends}
        for name in calls["numpy"]:
            times = {}
            for b in backends:
                fn = calls[b][name]
                fn()  # warm-up, includes JIT compilation for numba
                times[b] = min(timeit.repeat(fn, number=1, repeat=args.repeats))
            row = " ".join(f"{times[b] * 1e3:10.2f}ms" for b in backends)
            speed = f"{times['numpy'] / times['numba']:8.2f}x" if "numba" in times else ""
            print(f"{name:28s} {n:6d} {row} {speed}")


if __name__ == "__main__":
    main()
