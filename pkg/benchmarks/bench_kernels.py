"""Compare the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Both backends are imported directly, so the comparison does not depend on
PEGEQAT_PURE. Outputs are checked for bitwise equality before timing.
"""

import argparse
import timeit

import numpy as np

from pegeqat import _fallback

try:
    from pegeqat import _kernels
except ImportError:  # extension not built
    _kernels = None


def cases(rng):
    x = rng.standard_normal((64, 32, 16, 16)).astype(np.float32)
    cols = _fallback.im2col(x, 3, 3, 1, 1)
    flat = rng.standard_normal(1 << 20).astype(np.float32)
    xc, r = _fallback.quant_forward(flat, -2.0, 0.25, 3)
    g = rng.standard_normal(flat.shape).astype(np.float32)
    return {
        "im2col 64x32x16x16 k3": lambda m: m.im2col(x, 3, 3, 1, 1),
        "col2im 64x32x16x16 k3": lambda m: m.col2im(cols, 64, 32, 16, 16, 3, 3, 1, 1),
        "quant_forward 1M": lambda m: m.quant_forward(flat, -2.0, 0.25, 3),
        "estimator_backward PEGE 1M": lambda m: m.estimator_backward(g, xc, r, _fallback.PEGE, 0.1, 0.0),
        "estimator_backward EWGS 1M": lambda m: m.estimator_backward(g, xc, r, _fallback.EWGS, 0.0, 1e-3),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _kernels is None:
        print("compiled extension not available; build with `pip install -e . --no-build-isolation`")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}  equal")
    for name, fn in cases(rng).items():
        a, b = fn(_fallback), fn(_kernels)
        a = a if isinstance(a, tuple) else (a,)
        b = b if isinstance(b, tuple) else (b,)
        equal = all(np.array_equal(np.asarray(u), np.asarray(v)) for u, v in zip(a, b))
        tn = min(timeit.repeat(lambda: fn(_fallback), number=1, repeat=args.repeat)) * 1e3
        tc = min(timeit.repeat(lambda: fn(_kernels), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:32s} {tn:10.2f} {tc:10.2f} {tn / tc:7.2f}x  {equal}")


if __name__ == "__main__":
    main()
