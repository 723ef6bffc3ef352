"""Compare the numba and pure-numpy backends on the hot paths.

Each backend runs in its own interpreter because the backend is chosen at
import time from PIPEPLAN_DISABLE_NUMBA.

    python3 benchmarks/bench_kernels.py [--rows 1000000] [--repeat 5]
"""

from __future__ import annotations

import argparse
import json
import os
import statistics
import subprocess
import sys
import time


def _timed(fn, repeat: int) -> tuple[float, float]:
    """(first call, median of the following calls) in seconds."""
    t0 = time.perf_counter()
    fn()
    first = time.perf_counter() - t0
    runs = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        runs.append(time.perf_counter() - t0)
    return first, statistics.median(runs)


def worker(rows: int, repeat: int) -> dict:
    import numpy as np

    from pipeplan import backend_name
    from pipeplan.interference import InterferenceParams, pred_intf
    from pipeplan.intertuner import tune
    from pipeplan.intratuner import IntraSearchSpace, SearchOptions, pareto_indices, tune_intra
    from pipeplan.stagecost import IterationContext
    from pipeplan.workload import ClusterSpec, ModelSpec

    rng = np.random.default_rng(0)
    X = rng.uniform(0, 10, (rows, 4)) * (rng.random((rows, 4)) < 0.7)
    params = InterferenceParams.from_table(rng.uniform(1, 2, (11, 4)))
    t = rng.random(rows)
    d = rng.random(rows)

    model = ModelSpec(16, 2048, 16, 51200, 2048)
    cluster = ClusterSpec(2, 8, 40e9, 312e12, 0.5, 300e9, 25e9, 25e9, 25e9)
    opts = SearchOptions.preset("full", grid_step=1 / 4)
    space = IntraSearchSpace(2, 4, 1, 8, 4, 64, model.heads, opts)
    ctx = IterationContext(4, 3, 64, cluster.mem_budget)
    small = ModelSpec(8, 1024, 16, 8192, 512)

    cases = {
        f"pred_intf ({rows} rows)": lambda: pred_intf(X, params),
        f"pareto_indices ({rows} points)": lambda: pareto_indices(t, d),
        f"tune_intra ({space.size()} configs)": lambda: tune_intra(space, ctx, model, cluster, params),
        "tune (8 layers, 2x8 mesh)": lambda: tune(small, cluster, 32, SearchOptions.preset("+offload")),
    }
    out = {"backend": backend_name(), "cases": {}}
    for name, fn in cases.items():
        out["cases"][name] = _timed(fn, repeat)
    return out


def run_backend(disable: bool, rows: int, repeat: int) -> dict:
    env = dict(os.environ)
    env.pop("PIPEPLAN_DISABLE_NUMBA", None)
    if disable:
        env["PIPEPLAN_DISABLE_NUMBA"] = "1"
    cmd = [sys.executable, __file__, "--worker", "--rows", str(rows), "--repeat", str(repeat)]
    r = subprocess.run(cmd, env=env, capture_output=True, text=True, check=True)
    return json.loads(r.stdout)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--rows", type=int, default=1_000_000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.worker:
        print(json.dumps(worker(args.rows, args.repeat)))
        return

    fast = run_backend(False, args.rows, args.repeat)
    slow = run_backend(True, args.rows, args.repeat)
    if fast["backend"] != "numba":
        print("numba is not installed; only the numpy backend was measured")
    width = max(len(k) for k in slow["cases"])
    print(f"{'case':<{width}}  {'numpy':>10}  {fast['backend']:>10}  {'speedup':>8}  {'first call':>10}")
    for name, (_, t_np) in slow["cases"].items():
        first, t_nb = fast["cases"][name]
        print(f"{name:<{width}}  {t_np:>9.4f}s  {t_nb:>9.4f}s  {t_np / t_nb:>7.2f}x  {first:>9.3f}s")


if __name__ == "__main__":
    main()
