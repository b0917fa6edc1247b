"""Time the numba kernels against their pure-numpy twins.

Run from the repository root:

    python3 benchmarks/bench_kernels.py [--repeats N] [--quick]

The numba backend must be active (do not set DAVT_NUMBA=0), otherwise the
jitted twins are unavailable and this script exits.
"""

import argparse
import os
import time

os.environ.setdefault("DAVT_DEBUG_CHECKS", "0")  # benchmark mode

import numpy as np

from davt import _kernels as K


def time_fn(fn, args, repeats):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - start)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=7,
                        help="timing repetitions, best-of is reported")
    parser.add_argument("--quick", action="store_true",
                        help="smaller problem sizes")
    args = parser.parse_args()

    if K.BACKEND != "numba":
        raise SystemExit("numba backend inactive; unset DAVT_NUMBA to benchmark")

    rng = np.random.default_rng(0)
    scale = 4 if args.quick else 1
    cases = [
        ("bilinear_resize 64->448",
         "bilinear_resize",
         (rng.uniform(0, 1, (64, 64, 3)), 448 // scale, 448 // scale)),
        ("bilinear_resize 448->64",
         "bilinear_resize",
         (rng.uniform(0, 1, (448 // scale, 448 // scale, 3)), 64, 64)),
        ("softmax_rows 785x785",
         "softmax_rows",
         (rng.normal(0, 5, (785 // scale, 785 // scale)),)),
        ("gauss_cdf 1M",
         "gauss_cdf",
         (rng.normal(0, 2, 1_000_000 // (scale * scale)),)),
    ]

    print(f"{'kernel':<28} {'numpy':>10} {'numba':>10} {'speedup':>8}")
    for label, name, call_args in cases:
        numpy_fn, numba_fn = K.TWINS[name]
        numba_fn(*call_args)  # trigger JIT outside the timed region
        t_np = time_fn(numpy_fn, call_args, args.repeats)
        t_nb = time_fn(numba_fn, call_args, args.repeats)
        print(f"{label:<28} {t_np * 1e3:>8.3f}ms {t_nb * 1e3:>8.3f}ms "
              f"{t_np / t_nb:>7.2f}x")


if __name__ == "__main__":
    main()
