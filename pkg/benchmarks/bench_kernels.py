"""Compare the compiled and pure-Python im2col/col2im kernels.

Run with ``python3 benchmarks/bench_kernels.py [--repeat N]``.
"""

import argparse
import timeit

import numpy as np

from ssclab import _pykernels

try:
    from ssclab import _ckernels
except ImportError:  # extension not built
    _ckernels = None

GEOMETRIES = [
    # (batch, channels, height, width, kernel, stride, pad)
    (32, 3, 64, 48, 3, 2, 1),
    (32, 16, 32, 24, 3, 2, 1),
    (32, 64, 8, 6, 3, 1, 1),
]


def bench(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--dtype", default="float32", choices=("float32", "float64"))
    args = parser.parse_args(argv)
    rng = np.random.default_rng(0)
    backends = [("python", _pykernels)] + ([("cython", _ckernels)] if _ckernels else [])
    print(f"{'geometry':<28} {'kernel':<7} " + " ".join(f"{n:>10}" for n, _ in backends)
          + "   speedup")
    for b, c, h, w, k, s, p in GEOMETRIES:
        x = rng.standard_normal((b, c, h, w)).astype(args.dtype)
        cols = _pykernels.im2col(x, k, k, s, p)
        g = rng.standard_normal(cols.shape).astype(args.dtype)
        label = f"{b}x{c}x{h}x{w} k{k} s{s} p{p}"
        for name, call in (("im2col", lambda m: m.im2col(x, k, k, s, p)),
                           ("col2im", lambda m: m.col2im(g, x.shape, k, k, s, p))):
            ref = call(_pykernels)
            times = []
            for _, mod in backends:
                out = call(mod)
                if not np.array_equal(out, ref):
                    raise SystemExit(f"{name}: backends disagree on {label}")
                times.append(bench(lambda: call(mod), args.repeat))
            speed = f"{times[0] / times[-1]:8.2f}x" if len(times) > 1 else "       -"
            print(f"{label:<28} {name:<7} " + " ".join(f"{t:8.2f}ms" for t in times) + f"  {speed}")


if __name__ == "__main__":
    main()
