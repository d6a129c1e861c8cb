"""Time the compiled and numpy convolution lowering kernels side by side.

Usage: python benchmarks/bench_kernels.py [--repeats N]

Each row times im2col and col2im on one layer geometry from the desk model
and checks that both backends produce bit-identical outputs.
"""

import argparse
import timeit

import numpy as np

from drawergan import kernels

# (batch, channels, size, kernel, stride, pad, dilation)
GEOMETRIES = [
    (16, 3, 32, 7, 1, 3, 1),
    (16, 16, 32, 4, 2, 1, 1),
    (16, 64, 8, 3, 1, 1, 1),
    (16, 64, 8, 3, 1, 4, 4),
    (16, 128, 4, 3, 1, 2, 2),
]


def out_size(n, k, stride, pad, dil):
    return (n + 2 * pad - dil * (k - 1) - 1) // stride + 1


def time_backend(name, x, cols, geom, repeats):
    B, C, H, k, s, p, d = geom
    ho = out_size(H, k, s, p, d)
    kernels.use_backend(name)
    fwd = kernels.im2col(x, k, s, p, d, ho, ho)
    bwd = kernels.col2im(cols, x.shape, k, s, p, d, ho, ho)
    t_fwd = min(timeit.repeat(lambda: kernels.im2col(x, k, s, p, d, ho, ho),
                              number=1, repeat=repeats))
    t_bwd = min(timeit.repeat(lambda: kernels.col2im(cols, x.shape, k, s, p, d, ho, ho),
                              number=1, repeat=repeats))
    return t_fwd, t_bwd, fwd, bwd


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    try:
        kernels.use_backend("cython")
    except ImportError:
        print("compiled kernels are not built; run `pip install -e .` first")
        return 1

    rng = np.random.default_rng(args.seed)
    print(f"{'geometry':<28}{'op':<8}{'python ms':>11}{'cython ms':>11}{'speedup':>9}  equal")
    prev = kernels.BACKEND
    try:
        for geom in GEOMETRIES:
            B, C, H, k, s, p, d = geom
            ho = out_size(H, k, s, p, d)
            x = rng.standard_normal((B, C, H, H)).astype(np.float32)
            cols = rng.standard_normal((C * k * k, B * ho * ho)).astype(np.float32)
            py = time_backend("python", x, cols, geom, args.repeats)
            cy = time_backend("cython", x, cols, geom, args.repeats)
            label = f"B{B} C{C} {H}px k{k} s{s} p{p} d{d}"
            for i, op in enumerate(("im2col", "col2im")):
                same = np.array_equal(py[2 + i], cy[2 + i])
                print(f"{label:<28}{op:<8}{py[i] * 1e3:>11.3f}{cy[i] * 1e3:>11.3f}"
                      f"{py[i] / cy[i]:>8.1f}x  {same}")
    finally:
        kernels.use_backend(prev)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
