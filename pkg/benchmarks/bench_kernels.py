"""Time the compiled patch-gather kernels against the pure-NumPy fallback.

Shapes mirror what the encoders actually run during training (batch 4,
64x64 cubes, 8 bands, D=80).  Both backends must agree bitwise on the
forward output and every gradient; the point of the compiled path is speed,
never different numbers.

Usage: python3 benchmarks/bench_kernels.py [--batch 4] [--repeats 5]
"""

import argparse
import time

import numpy as np

from smokeseg import kernels


def conv_case(name, shape, cin, cout, groups, stride):
    return (name, shape, cin, cout, groups, stride)


def cases(batch):
    return [
        conv_case("embed s1, g=8", (batch, 64, 64), 8, 8, 8, 2),
        conv_case("embed s2, g=8", (batch, 32, 32), 8, 16, 8, 2),
        conv_case("res s3, g=8", (batch, 16, 16), 40, 40, 8, 1),
        conv_case("res s4, g=8", (batch, 16, 16), 64, 64, 8, 1),
        conv_case("res s3, g=1", (batch, 16, 16), 40, 40, 1, 1),
        conv_case("res s4, g=1", (batch, 16, 16), 64, 64, 1, 1),
    ]


def run_once(x, w, b, groups, stride):
    y, cache = kernels.conv2d_forward(x, w, b, groups=groups, stride=stride, padding=1)
    gy = np.ones_like(y)
    gx, gw, gb = kernels.conv2d_backward(gy, cache)
    return y, gx, gw, gb


def timed(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return out, best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=4)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    if not kernels.compiled_available():
        raise SystemExit("compiled kernel extension is not built; nothing to compare")

    rng = np.random.default_rng(0)
    print(f"{'case':<16} {'python ms':>10} {'compiled ms':>12} {'speedup':>8}   bitwise")
    for name, (batch, h, wid), cin, cout, groups, stride in cases(args.batch):
        x = rng.standard_normal((batch, h, wid, cin))
        w = rng.standard_normal((3, 3, cin // groups, cout)) * 0.05
        b = rng.standard_normal(cout) * 0.01

        kernels.set_backend("python")
        ref, t_py = timed(lambda: run_once(x, w, b, groups, stride), args.repeats)
        kernels.set_backend("compiled")
        fast, t_c = timed(lambda: run_once(x, w, b, groups, stride), args.repeats)

        same = all(np.array_equal(a, c) for a, c in zip(ref, fast))
        print(
            f"{name:<16} {1e3 * t_py:>10.2f} {1e3 * t_c:>12.2f} "
            f"{t_py / t_c:>7.2f}x   {'yes' if same else 'NO'}"
        )
        if not same:
            raise SystemExit("backend outputs diverged; see kernels/__init__.py contract")
    kernels.set_backend("compiled")


if __name__ == "__main__":
    main()
