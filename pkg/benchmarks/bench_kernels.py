"""Compare the compiled row kernels with the numpy fallback.

Usage::

    python benchmarks/bench_kernels.py [--rows 12800] [--cols 200] [--repeat 20]

The default shape is one attention softmax of a default-size model at batch
16 (batch x heads x tokens rows of 200 scores). Prints one line per kernel
with the best-of-``repeat`` time for each backend and the speedup.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from costeps.tensor.kernels import backends


def best_time(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(mod, rows: int, cols: int, dtype):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((rows, cols)).astype(dtype)
    gy = rng.standard_normal((rows, cols)).astype(dtype)
    out = np.empty_like(x)
    gx = np.empty_like(x)
    rstd = np.empty(rows, dtype=dtype)
    flat, gflat, oflat = x.reshape(-1), gy.reshape(-1), np.empty(x.size, dtype=dtype)
    mod.softmax_forward(x, out)
    y = out.copy()
    mod.layernorm_forward(x, out, rstd, 1e-5)
    xhat = out.copy()
    return {
        "softmax_forward": lambda: mod.softmax_forward(x, out),
        "softmax_backward": lambda: mod.softmax_backward(y, gy, gx),
        "layernorm_forward": lambda: mod.layernorm_forward(x, out, rstd, 1e-5),
        "layernorm_backward": lambda: mod.layernorm_backward(xhat, rstd, gy, gx),
        "gelu_forward": lambda: mod.gelu_forward(flat, oflat),
        "gelu_backward": lambda: mod.gelu_backward(flat, gflat, oflat),
    }


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--rows", type=int, default=16 * 4 * 200)
    parser.add_argument("--cols", type=int, default=200)
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    args = parser.parse_args(argv)
    mods = backends()
    if "cython" not in mods:
        print("compiled kernels are not built; only the python backend is available")
    dtype = np.dtype(args.dtype)
    timings = {name: {k: best_time(f, args.repeat) for k, f in cases(mod, args.rows, args.cols, dtype).items()} for name, mod in mods.items()}
    print(f"rows={args.rows} cols={args.cols} dtype={args.dtype} repeat={args.repeat}")
    print(f"{'kernel':<20}" + "".join(f"{name:>12}" for name in timings) + f"{'speedup':>10}")
    for kernel in timings["python"]:
        row = "".join(f"{timings[name][kernel] * 1e3:>10.2f}ms" for name in timings)
        speed = timings["python"][kernel] / timings["cython"][kernel] if "cython" in timings else float("nan")
        print(f"{kernel:<20}{row}{speed:>9.2f}x")


if __name__ == "__main__":
    main()
