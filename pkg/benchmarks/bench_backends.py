"""Compare the numba and numpy kernel backends.

Each backend runs in its own interpreter because the choice is fixed at import:

    python3 benchmarks/bench_backends.py            # both backends, summary table
    python3 benchmarks/bench_backends.py --inner    # one backend (from QPC_SCREEN_BACKEND)
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def _best(fn, repeat):
    fn()  # warm-up (includes JIT compilation for numba)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def inner(n: int, p: int, repeat: int) -> dict:
    from qpc_screen import BACKEND, Dataset, ScreenConfig, qr_fit, run_screen
    from qpc_screen.qpc import qpc_screen_scores
    from qpc_screen.simulation import DgpSpec, generate

    sim = generate(DgpSpec(n=n, p=p, seed=11))
    ds = sim.train
    X12 = ds.X[:, :12]
    out = {"backend": BACKEND}
    out["qr_fit n x 13 (ms)"] = 1e3 * _best(lambda: [qr_fit(ds.y, X12, 0.5) for _ in range(20)],
                                            repeat) / 20
    cands = list(range(5, p))
    out["qpc scores, shared S (ms)"] = 1e3 * _best(
        lambda: qpc_screen_scores(ds, cands, [0, 1, 2, 3, 4], 0.5), repeat)
    for alg in ("QPCFR", "QPCS"):
        cfg = ScreenConfig(tau=0.5, algorithm=alg)
        out[f"{alg} run (s)"] = _best(lambda: run_screen(ds, cfg), max(1, repeat // 3))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--inner", action="store_true")
    ap.add_argument("--n", type=int, default=200)
    ap.add_argument("--p", type=int, default=1000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if args.inner:
        print(json.dumps(inner(args.n, args.p, args.repeat)))
        return
    results = []
    for backend in ("numba", "numpy"):
        env = dict(os.environ, QPC_SCREEN_BACKEND=backend)
        cmd = [sys.executable, __file__, "--inner", "--n", str(args.n), "--p", str(args.p),
               "--repeat", str(args.repeat)]
        res = subprocess.run(cmd, env=env, capture_output=True, text=True, check=True)
        results.append(json.loads(res.stdout.strip().splitlines()[-1]))
    keys = [k for k in results[0] if k != "backend"]
    print(f"n={args.n} p={args.p}")
    print(f"{'measure':32s} {'numba':>10s} {'numpy':>10s} {'speedup':>8s}")
    for k in keys:
        a, b = results[0][k], results[1][k]
        print(f"{k:32s} {a:10.3f} {b:10.3f} {b / a:8.1f}x")


if __name__ == "__main__":
    np.seterr(all="ignore")
    main()
