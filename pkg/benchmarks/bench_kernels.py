"""Compiled vs numpy branch kernels, plus one end-to-end case30 solve per backend.

Usage: python3 benchmarks/bench_kernels.py [--branches N] [--repeat R]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from acdispatch import _kernels_py

try:
    from acdispatch import _kernels
except ImportError:
    _kernels = None

SOLVE = ("import time; from acdispatch import fixtures, solve_dispatch, KERNELS; c = fixtures.load('case30'); "
         "t = time.perf_counter(); solve_dispatch(c); print(KERNELS, time.perf_counter() - t)")


def _inputs(m, n, seed=0):
    rng = np.random.default_rng(seed)
    K = np.ascontiguousarray(rng.normal(size=(4, 4, m)))
    f = rng.integers(0, n, m).astype(np.int64)
    t = ((f + 1 + rng.integers(0, n - 1, m)) % n).astype(np.int64)
    return K, f, t, rng.uniform(-0.3, 0.3, n), rng.uniform(0.95, 1.05, n), rng.normal(size=(4, m))


def bench_kernels(m, repeat):
    K, f, t, th, vm, w = _inputs(m, max(2, m // 2))
    mods = [("numpy", _kernels_py)] + ([("cython", _kernels)] if _kernels else [])
    print(f"kernel timings, {m} branches, best of {repeat} (microseconds per call)")
    print(f"{'kernel':18s}" + "".join(f"{name:>12s}" for name, _ in mods))
    for kname, args in (("flows", (K, f, t, th, vm)), ("flow_grads", (K, f, t, th, vm)),
                        ("weighted_hessian", (K, f, t, th, vm, w))):
        row = []
        for _, mod in mods:
            fn = getattr(mod, kname)
            n = 200
            best = min(timeit.repeat(lambda: fn(*args), number=n, repeat=repeat)) / n
            row.append(best * 1e6)
        print(f"{kname:18s}" + "".join(f"{v:12.2f}" for v in row))


def bench_solve():
    print("end-to-end case30 solve (seconds)")
    for force in ("1", ""):
        env = dict(os.environ)
        env.pop("ACDISPATCH_PURE_PYTHON", None)
        if force:
            env["ACDISPATCH_PURE_PYTHON"] = force
        out = subprocess.run([sys.executable, "-c", SOLVE], env=env, capture_output=True, text=True, check=True)
        name, secs = out.stdout.split()
        print(f"  {name:8s} {float(secs):.3f}")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--branches", type=int, default=2000)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--skip-solve", action="store_true")
    a = p.parse_args()
    bench_kernels(a.branches, a.repeat)
    if not a.skip_solve:
        bench_solve()


if __name__ == "__main__":
    main()
