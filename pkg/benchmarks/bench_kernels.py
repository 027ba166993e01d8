"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--paths N] [--steps N] [--repeat N] [--threads N]

Times Gaussian block generation and the LQ closed-loop kernel on both
backends and checks that they agree to rounding.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from rsmfc import _kernels_py

try:
    from rsmfc import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None


def best_of(fn, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def closed_loop_args(n_paths, n_steps):
    n = n_steps + 1
    t = np.linspace(0.0, 1.0, n)
    gain = -1.0 / (1.0 + 0.5 * (1.0 - t))
    return dict(
        x0=1.0, a=0.5, b=1.0, sigma=0.3, dt=1.0 / n_steps, n_steps=n_steps, gain=gain,
        shift=None, offset=None, gamma=0.3 * -gain, theta=0.2, seed=20240601, path0=0,
        n_paths=n_paths, substeps=1, increments=None, record_every=1, threshold=1e10,
        store_increments=False,
    )


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--paths", type=int, default=20_000)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args(argv)

    backends = [("python", _kernels_py)]
    if _compiled is not None:
        backends.insert(0, ("cython", _compiled))
    else:
        print("compiled extension not available; timing the numpy fallback only")

    cases = {
        "normals": lambda mod: mod.normals(1, 0, args.paths, 0, args.steps),
        "lq_closed_loop": lambda mod: mod.lq_closed_loop(
            **closed_loop_args(args.paths, args.steps),
            **({"threads": args.threads} if mod is _compiled else {})),
    }
    print(f"{args.paths} paths x {args.steps} steps, best of {args.repeat}")
    print(f"{'kernel':<16}{'backend':<10}{'seconds':>10}{'speed-up':>10}")
    for name, fn in cases.items():
        results = {}
        for label, mod in backends:
            results[label] = best_of(lambda: fn(mod), args.repeat)
        base = results["python"][0]
        for label, (secs, _) in results.items():
            print(f"{name:<16}{label:<10}{secs:>10.4f}{base / secs:>9.1f}x")
        if len(results) == 2:
            a = results["cython"][1]
            b = results["python"][1]
            a = a[0] if isinstance(a, tuple) else a
            b = b[0] if isinstance(b, tuple) else b
            print(f"{'':<16}max |cython - python| = {float(np.max(np.abs(a - b))):.2e}")


if __name__ == "__main__":
    main()
