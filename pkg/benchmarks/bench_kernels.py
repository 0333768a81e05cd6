"""Time the bilinear sampling kernels on the numba and numpy backends.

    python benchmarks/bench_kernels.py [--size 64] [--batch 8] [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from atlasgan import _kernels as K


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--channels", type=int, default=1)
    ap.add_argument("--repeat", type=int, default=20)
    a = ap.parse_args()
    rng = np.random.default_rng(0)
    n = a.size
    img = rng.standard_normal((a.batch, a.channels, n, n)).astype(np.float32)
    iy, ix = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    cy = (iy + rng.normal(0, 2, (a.batch, n, n))).astype(np.float32)
    cx = (ix + rng.normal(0, 2, (a.batch, n, n))).astype(np.float32)
    g = rng.standard_normal(img.shape).astype(np.float32)
    kernels = {"numpy": (K.bilinear_sample_np, K.bilinear_sample_backward_np)}
    if K.HAVE_NUMBA:
        kernels["numba"] = (K.bilinear_sample, K.bilinear_sample_backward)
        K.bilinear_sample(img, cy, cx)  # compile outside the timing
        K.bilinear_sample_backward(g, img, cy, cx)
    print(f"batch={a.batch} channels={a.channels} size={n}x{n} repeat={a.repeat}")
    base = {}
    for name, (fwd, bwd) in kernels.items():
        for op, fn in (("forward", lambda: fwd(img, cy, cx)), ("backward", lambda: bwd(g, img, cy, cx))):
            t = min(timeit.repeat(fn, number=1, repeat=a.repeat))
            base.setdefault(op, t)
            print(f"{name:6s} {op:8s} {t * 1e3:8.3f} ms  speedup x{base[op] / t:.2f}")


if __name__ == "__main__":
    main()
