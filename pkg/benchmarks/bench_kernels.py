"""Compare the jitted and reference kernel backends on real layer shapes.

Usage: python benchmarks/bench_kernels.py [--repeats 5] [--batch 64]

Times the forward and backward kernels on the shapes the MNIST model
actually runs, prints a table with per-call milliseconds for both
backends and the speedup factor. The first jitted call compiles, so
every kernel is warmed up before timing.
"""

import argparse
import time

import numpy as np

from prunekit.kernels import numba_ops, numpy_ops


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def layer_cases(batch):
    rng = np.random.default_rng(0)

    def t(*shape):
        return rng.normal(size=shape)

    cases = []

    def conv_case(name, x, w):
        b = t(w.shape[0])
        out = numpy_ops.conv2d_forward(x, w, b, 1, 0)
        g = t(*out.shape)
        cases.append((f"{name} fwd", lambda k: k.conv2d_forward(x, w, b, 1, 0)))
        cases.append(
            (f"{name} bwd", lambda k: k.conv2d_backward(x, w, 1, 0, g))
        )

    conv_case("conv 1x28x28->20", t(batch, 1, 28, 28), t(20, 1, 5, 5))
    conv_case("conv 20x12x12->50", t(batch, 20, 12, 12), t(50, 20, 5, 5))

    x = t(batch, 800)
    w = t(500, 800)
    b = t(500)
    out = numpy_ops.dense_forward(x, w, b)
    g = t(*out.shape)
    cases.append(("dense 800->500 fwd", lambda k: k.dense_forward(x, w, b)))
    cases.append(("dense 800->500 bwd", lambda k: k.dense_backward(x, w, g)))

    px = t(batch, 20, 24, 24)
    pout, pidx = numpy_ops.maxpool2x2_forward(px)
    pg = t(*pout.shape)
    cases.append(("maxpool 20x24x24 fwd", lambda k: k.maxpool2x2_forward(px)))
    cases.append(
        ("maxpool 20x24x24 bwd",
         lambda k: k.maxpool2x2_backward(pg, pidx, px.shape[2], px.shape[3]))
    )
    return cases


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--batch", type=int, default=64)
    args = ap.parse_args()

    cases = layer_cases(args.batch)
    for _, fn in cases:  # compile everything before timing
        fn(numba_ops)

    width = max(len(name) for name, _ in cases)
    print(f"{'kernel':<{width}}  {'numpy ms':>10}  {'numba ms':>10}  {'speedup':>8}")
    for name, fn in cases:
        t_np = best_of(lambda: fn(numpy_ops), args.repeats) * 1e3
        t_nb = best_of(lambda: fn(numba_ops), args.repeats) * 1e3
        print(f"{name:<{width}}  {t_np:>10.3f}  {t_nb:>10.3f}  {t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
