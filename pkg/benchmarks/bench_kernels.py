"""Compare the compiled and numpy im2col/col2im kernels on typical layer shapes.

    python benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from hfmf import _kernels_py

try:
    from hfmf import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

SHAPES = {
    "stem 32x32 c3->16": (32, 3, 32, 32, 3, 1, 1),
    "stage 16x16 c16 s2": (32, 16, 32, 32, 3, 2, 1),
    "stage 8x8 c32": (32, 32, 8, 8, 3, 1, 1),
    "patchify p8": (32, 3, 32, 32, 8, 8, 0),
}


def bench(impl, shape, repeat):
    B, C, H, W, k, s, p = shape
    x = np.random.default_rng(0).normal(size=(B, C, H, W))
    cols = impl.im2col(x, k, k, s, p)
    t_fwd = min(timeit.repeat(lambda: impl.im2col(x, k, k, s, p), number=1, repeat=repeat))
    t_bwd = min(timeit.repeat(lambda: impl.col2im(cols, C, H, W, k, k, s, p), number=1, repeat=repeat))
    return t_fwd, t_bwd


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    print(f"{'shape':<22}{'kernel':<8}{'python ms':>11}{'cython ms':>11}{'speedup':>9}")
    for name, shape in SHAPES.items():
        py = bench(_kernels_py, shape, args.repeat)
        cy = bench(_compiled, shape, args.repeat) if _compiled else (float("nan"),) * 2
        for label, a, b in (("im2col", py[0], cy[0]), ("col2im", py[1], cy[1])):
            print(f"{name:<22}{label:<8}{a * 1e3:>11.3f}{b * 1e3:>11.3f}{a / b:>8.2f}x")


if __name__ == "__main__":
    main()
