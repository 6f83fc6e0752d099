"""Time the compiled kernels against the pure-numpy fallback.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel runs on identical inputs under both backends; the script also
reports the max absolute difference between the two outputs.
"""
from __future__ import annotations

import argparse
import json
import platform
import time

import numpy as np

from aeroinr import kernels
from aeroinr.encoding import MultiscaleEncoder
from aeroinr.geometry import icosphere
from aeroinr.neuralfield import NeuralField


def _field_case(n_points: int):
    rng = np.random.default_rng(0)
    enc = MultiscaleEncoder.from_sigmas(64, 3, [1.0, 5.0], seed=0)
    nf = NeuralField.init(enc, (128,) * 4, d_u=1, seed=0)
    X = rng.uniform(-1, 1, size=(n_points, 3))
    B, ident, Ws, bs = nf.kernel_args()
    phi = rng.normal(scale=0.1, size=(nf.L, 128))
    args = (X, B, ident, Ws, bs, phi, nf.params["W_out"], nf.params["b_out"])
    return lambda: kernels.field_forward(*args)


def _mesh_case(n_points: int, subdiv: int):
    rng = np.random.default_rng(1)
    tris = icosphere(subdiv).soup()
    P = rng.uniform(-1.2, 1.2, size=(n_points, 3))
    return (lambda: kernels.closest_sqdist(P, tris)[0]), (lambda: kernels.winding_number(P, tris)), len(tris)


def _time(fn, repeat: int) -> tuple[float, np.ndarray]:
    out = fn()  # warm-up
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, np.asarray(out)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--points", type=int, default=2000)
    ap.add_argument("--subdiv", type=int, default=3)
    ap.add_argument("--json", default=None)
    ns = ap.parse_args(argv)

    closest, winding, n_tris = _mesh_case(ns.points // 4, ns.subdiv)
    cases = {
        f"field_forward ({ns.points} pts, 4x128, M=2)": _field_case(ns.points),
        f"closest_sqdist ({ns.points // 4} pts, {n_tris} tris)": closest,
        f"winding_number ({ns.points // 4} pts, {n_tris} tris)": winding,
    }
    backends = [b for b in ("python", "compiled") if b in kernels.BACKENDS]
    start = kernels.BACKEND
    results = []
    try:
        for name, fn in cases.items():
            row = {"kernel": name}
            outs = {}
            for b in backends:
                kernels.use_backend(b)
                row[b], outs[b] = _time(fn, ns.repeat)
            if len(outs) == 2:
                row["speedup"] = row["python"] / row["compiled"]
                row["max_abs_diff"] = float(np.max(np.abs(outs["python"] - outs["compiled"])))
            results.append(row)
    finally:
        kernels.use_backend(start)

    print(f"{'kernel':48s} " + " ".join(f"{b:>10s}" for b in backends) + "   speedup   max|diff|")
    for r in results:
        times = " ".join(f"{r[b] * 1e3:8.1f}ms" for b in backends)
        extra = f"  {r['speedup']:7.1f}x  {r['max_abs_diff']:.1e}" if "speedup" in r else ""
        print(f"{r['kernel']:48s} {times}{extra}")
    if ns.json:
        with open(ns.json, "w") as f:
            json.dump({"machine": platform.platform(), "results": results}, f, indent=2)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
