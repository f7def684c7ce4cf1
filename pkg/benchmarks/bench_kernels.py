"""Compare the compiled and NumPy time-tag kernels.

Run with ``python benchmarks/bench_kernels.py [--events N]``. Both backends
are imported directly, so no environment variable is needed; the outputs are
checked for equality before timings are printed.
"""
import argparse
import time

import numpy as np

from zplqe import _pykernels

try:
    from zplqe import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def _best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--events", type=int, default=1_000_000, help="events per channel")
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    # Timestamps are integer picoseconds; 1 Mcps per channel.
    mean_gap_ps = 1e6
    t1 = np.cumsum(rng.exponential(mean_gap_ps, args.events)).astype(np.int64)
    t2 = np.cumsum(rng.exponential(mean_gap_ps, args.events)).astype(np.int64)
    dead = 50_000
    width, nbins = 500, 201
    lo = -width * (nbins // 2) - width // 2

    cases = {
        "deadtime_mask": lambda m: m.deadtime_mask(t1, dead),
        "cross_correlate": lambda m: m.cross_correlate(t1, t2, lo, width, nbins),
    }
    backends = {"python": _pykernels}
    if _ckernels is not None:
        backends["cython"] = _ckernels
    print(f"{args.events} events per channel, best of {args.repeat}")
    for name, case in cases.items():
        times, outs = {}, {}
        for label, mod in backends.items():
            times[label], outs[label] = _best_of(lambda: case(mod), args.repeat)
        if "cython" in outs:
            assert np.array_equal(np.asarray(outs["python"]), np.asarray(outs["cython"])), name
        line = "  ".join(f"{k} {v * 1e3:9.2f} ms" for k, v in times.items())
        if "cython" in times:
            line += f"  speedup {times['python'] / times['cython']:.1f}x"
        print(f"{name:16s} {line}")
    if _ckernels is None:
        print("compiled kernels not built; only the NumPy fallback was timed")


if __name__ == "__main__":
    main()
