"""Compare the numba and pure-numpy paths of the preprocessing kernels.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Both paths are imported from the same module; the numba variants are
compiled once before timing so JIT cost is reported separately.
"""

import argparse
import time

import numpy as np

from more import _kernels as K


def _time(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (256, 256)).astype(np.uint8)
    ecg = rng.normal(size=(12, 1000))
    clip = 16
    cases = {
        "clahe_luts": (
            lambda: K._clahe_luts_numpy(img, 8, 8, clip),
            (lambda: K._clahe_luts_numba(img, 8, 8, clip)) if K._HAVE_NUMBA else None,
        ),
        "moving_median": (
            lambda: K._moving_median_numpy(ecg, 61),
            (lambda: K._moving_median_numba(ecg, 61)) if K._HAVE_NUMBA else None,
        ),
    }
    luts = K._clahe_luts_numpy(img, 8, 8, clip)
    cases["clahe_interp"] = (
        lambda: K._clahe_interp_numpy(img, luts, 32, 32),
        (lambda: K._clahe_interp_numba(img, luts, 32, 32)) if K._HAVE_NUMBA else None,
    )
    print(f"{'kernel':<16}{'numpy ms':>12}{'numba ms':>12}{'jit ms':>10}{'speedup':>10}")
    for name, (np_fn, nb_fn) in cases.items():
        t_np = _time(np_fn, args.repeat) * 1e3
        if nb_fn is None:
            print(f"{name:<16}{t_np:>12.2f}{'n/a':>12}")
            continue
        t0 = time.perf_counter()
        a, b = np_fn(), nb_fn()
        jit = (time.perf_counter() - t0) * 1e3
        assert np.array_equal(a, b), f"{name}: paths disagree"
        t_nb = _time(nb_fn, args.repeat) * 1e3
        print(f"{name:<16}{t_np:>12.2f}{t_nb:>12.2f}{jit:>10.0f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
