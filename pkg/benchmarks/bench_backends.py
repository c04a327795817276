#!/usr/bin/env python3
"""numba vs numpy kernel timings, plus a full ATF bank row.

    python3 benchmarks/bench_backends.py [--runs 5] [--json out.json]
"""

import argparse
import json
import math
import sys
import time

import numpy as np

from capsphere import _accel, kernels
from capsphere import atf_core as ac
from capsphere import pressure_field as pf

K = ac.FrequencyGrid().wavenumbers(pf.Medium())[1:]
X = K * 0.0875


def cases():
    g = pf.SceneGeometry(source_azimuth=math.radians(40))
    return {
        "jn_table(120, 256 bins)": lambda: kernels.jn_table(120, X),
        "rho_table(120, 256 bins)": lambda: kernels.rho_table(120, X),
        "hankel_quotient(120, 256 bins)": lambda: kernels.hankel_quotient_table(120, K * 1.0, X),
        "legendre(1000)": lambda: kernels.legendre_table(1000, np.array([0.3])),
        "cap_geometry_sums(40000)": lambda: kernels.cap_geometry_sums(0.2, 0.3, 40000, 512),
        "external_atf": lambda: ac.external_atf(g),
        "own_atf (tail sums cached)": lambda: ac.own_atf(g),
    }


def bench(fn, runs):
    fn()  # warm-up, includes jit compile
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--runs", type=int, default=5)
    ap.add_argument("--json")
    args = ap.parse_args(argv)
    backends = ["numpy"] + (["numba"] if _accel.HAVE_NUMBA else [])
    results = {}
    for name in backends:
        _accel.set_backend(name)
        results[name] = {label: bench(fn, args.runs) for label, fn in cases().items()}
    width = max(len(c) for c in results["numpy"])
    print(f"{'case':<{width}}  " + "  ".join(f"{b:>10}" for b in backends) + "   speedup")
    for label in results["numpy"]:
        row = [results[b][label] for b in backends]
        speed = row[0] / row[-1] if len(row) > 1 else 1.0
        print(f"{label:<{width}}  " + "  ".join(f"{t * 1e3:8.2f}ms" for t in row) + f"   {speed:6.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=1, sort_keys=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
