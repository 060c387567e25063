"""Time the car-model kernels: compiled against the pure-numpy fallback.

Run as ``python benchmarks/bench_kernels.py``; when numba is active the
script re-invokes itself with ``CARNMPC_PURE_NUMPY=1`` and prints both
modes side by side, including a digest check that the two code paths
compute the same numbers.
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from carnmpc import kernels

ELL = 2.9
H = 0.3
MIN_WINDOW = 0.2  # seconds of work per measurement


def _inputs(n):
    rng = np.random.default_rng(7)
    states = rng.uniform(-1.0, 1.0, (n, 5))
    states[:, 3] = rng.uniform(4.0, 12.0, n)  # forward speed
    states[:, 4] = rng.uniform(-0.4, 0.4, n)
    controls = rng.uniform(-1.0, 1.0, (n, 2))
    lam = rng.uniform(-1.0, 1.0, 5)
    return states, controls, lam


def _kernel_calls():
    return {
        "rk4_step": lambda s, u, lam: kernels.rk4_step(s, u, ELL, H),
        "rk4_step_jac": lambda s, u, lam: kernels.rk4_step_jac(s, u, ELL, H),
        "rk4_step_derivs": lambda s, u, lam: kernels.rk4_step_derivs(s, u, ELL, H),
        "rk4_step_curvature": lambda s, u, lam: kernels.rk4_step_curvature(s, u, ELL, H, lam),
    }


def bench(repeat):
    states, controls, lam = _inputs(256)
    kernels.warmup()
    results = {}
    for name, call in _kernel_calls().items():
        digest = 0.0
        for k in range(states.shape[0]):
            out = call(states[k], controls[k], lam)
            parts = out if isinstance(out, tuple) else (out,)
            digest += sum(float(np.sum(p)) for p in parts)
        best = float("inf")
        for _ in range(repeat):
            done = 0
            elapsed = 0.0
            while elapsed < MIN_WINDOW:
                t0 = time.perf_counter()
                for k in range(states.shape[0]):
                    call(states[k], controls[k], lam)
                elapsed += time.perf_counter() - t0
                done += states.shape[0]
            best = min(best, elapsed / done)
        results[name] = {"ns_per_call": best * 1e9, "digest": digest}
    return results


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--json", action="store_true", help="machine output for the child run")
    args = ap.parse_args(argv)

    results = bench(args.repeat)
    mode = "numba" if kernels.HAVE_NUMBA else "numpy"
    if args.json:
        print(json.dumps({"mode": mode, "results": results}))
        return 0

    other = None
    if kernels.HAVE_NUMBA:
        env = dict(os.environ, CARNMPC_PURE_NUMPY="1")
        out = subprocess.run(
            [sys.executable, os.path.abspath(__file__), "--json", "--repeat", str(args.repeat)],
            env=env, capture_output=True, text=True, check=True,
        )
        other = json.loads(out.stdout)

    print(f"{'kernel':20s} {mode + ' ns':>12s}", end="")
    if other:
        print(f" {other['mode'] + ' ns':>12s} {'speedup':>8s}", end="")
    print()
    for name, res in results.items():
        print(f"{name:20s} {res['ns_per_call']:12.0f}", end="")
        if other:
            alt = other["results"][name]
            if abs(alt["digest"] - res["digest"]) > 1e-9 * max(1.0, abs(res["digest"])):
                raise SystemExit(f"{name}: digests differ between modes")
            print(f" {alt['ns_per_call']:12.0f} {alt['ns_per_call'] / res['ns_per_call']:8.1f}", end="")
        print()
    if other:
        print("digests match between modes")
    return 0


if __name__ == "__main__":
    sys.exit(main())
