"""Compare the compiled and pure-Python flow kernels on the two-qubit problem.

Run with ``python benchmarks/bench_flow.py``.  Each case integrates the
geodesic and brachistochrone flows to T=1 and reports the median wall time
and the largest endpoint difference between the two kernels.
"""
from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from qbrach._backend import flow_compiled, flow_python
from qbrach.dynamics import _kernel_params
from qbrach.liealg import build_split


def _time(fn, repeats: int) -> tuple[float, dict]:
    out = fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times), out


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--tol", type=float, default=1e-10)
    args = ap.parse_args(argv)
    if flow_compiled is None:
        raise SystemExit("compiled kernel not built; run `pip install -e . --no-build-isolation`")
    split = build_split(None, "two_qubit_heisenberg")
    rng = np.random.default_rng(0)
    z0 = rng.normal(size=split.dim) * 1.5
    cases = [("geodesic q=1", "geodesic", 1.0, False), ("geodesic q=20", "geodesic", 20.0, False),
             ("geodesic q=20 +variational", "geodesic", 20.0, True),
             ("brachistochrone", "brachistochrone", 1.0, False),
             ("brachistochrone +variational", "brachistochrone", 1.0, True)]
    print(f"{'case':32s} {'compiled [ms]':>14s} {'python [ms]':>12s} {'speedup':>8s} {'max |dU|':>10s}")
    for label, kind, q, var in cases:
        a, b, s, e, r = _kernel_params(split, kind, q)

        def run(kernel):
            return lambda: kernel(split.f, a, b, s, e, r, split.elements, z0, np.eye(split.n, dtype=complex), 1.0,
                                  args.tol, args.tol, np.empty(0), variational=var, replay=False)

        tc, oc = _time(run(flow_compiled), args.repeats)
        tp, op = _time(run(flow_python), args.repeats)
        diff = np.abs(oc["U"] - op["U"]).max()
        print(f"{label:32s} {1e3 * tc:14.2f} {1e3 * tp:12.2f} {tp / tc:8.1f} {diff:10.1e}")


if __name__ == "__main__":
    main()
