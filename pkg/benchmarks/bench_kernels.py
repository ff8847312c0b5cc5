"""Numba vs numpy timings for the synth kernels.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--size 36x60]

Both backends are checked for identical output before timing. Numba
compile time is reported separately (first call), not folded into the
per-call numbers.
"""
import argparse
import time
import timeit

import numpy as np

from gazekit import kernels
from gazekit._accel import HAS_NUMBA
from gazekit.synth import eye_landmarks, sample_scene


def _cases(h, w):
    lm = eye_landmarks(sample_scene(0), h, w)
    poly = np.asarray(lm.eyelid_polygon)
    cx, cy = lm.iris_center
    return {
        "polygon_mask": lambda nb: kernels.polygon_mask(poly, h, w, use_numba=nb),
        "disk_mask": lambda nb: kernels.disk_mask(cx, cy, lm.iris_radius, h, w, use_numba=nb),
        "value_noise": lambda nb: kernels.value_noise(np.random.default_rng(0), h, w, 8.0, use_numba=nb),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--size", default="36x60")
    args = ap.parse_args(argv)
    h, w = map(int, args.size.lower().split("x"))
    if not HAS_NUMBA:
        print("numba not installed; numpy timings only")
    print(f"{'kernel':<14}{'numpy us':>12}{'numba us':>12}{'speedup':>10}{'compile s':>12}")
    for name, fn in _cases(h, w).items():
        ref = fn(False)
        t_np = min(timeit.repeat(lambda: fn(False), number=10, repeat=args.repeat)) / 10 * 1e6
        if not HAS_NUMBA:
            print(f"{name:<14}{t_np:>12.1f}")
            continue
        t0 = time.perf_counter()
        got = fn(True)
        compile_s = time.perf_counter() - t0
        if not np.array_equal(ref, got):
            raise SystemExit(f"{name}: backends disagree")
        t_nb = min(timeit.repeat(lambda: fn(True), number=10, repeat=args.repeat)) / 10 * 1e6
        print(f"{name:<14}{t_np:>12.1f}{t_nb:>12.1f}{t_np / t_nb:>9.1f}x{compile_s:>12.2f}")


if __name__ == "__main__":
    main()
