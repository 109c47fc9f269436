"""Time the hot kernels on the numba and pure-numpy backends.

The backend is fixed at import time, so each one runs in its own
subprocess (``FPSOLVE_DISABLE_NUMBA=1`` for numpy). Both runs use the same
seeds; the parent checks that their outputs agree and prints a table.

    python benchmarks/bench_kernels.py [--steps 200000] [--repeat 3]
"""
import argparse
import json
import os
import subprocess
import sys
import time

WORKER = r"""
import json, sys, time
import numpy as np
from fpsolve._accel import BACKEND
from fpsolve.cgfilter import cg_reference_densities, decompose
from fpsolve.grid import GridSpec
from fpsolve.models import make_builtin
from fpsolve.sampler import (ReferenceSet, Trajectory, TrajectoryConfig, estimate_density_full_grid,
                             estimate_density_split, sample_collocation, snap_to_grid)

steps, repeat = int(sys.argv[1]), int(sys.argv[2])
cfg = TrajectoryConfig(seed=1, burn_in_time=1.0)
ring2d, ring4d, gibbs2d = make_builtin("ring2d"), make_builtin("ring4d"), make_builtin("gibbs2d")
grid4 = GridSpec(ring4d.domain, 10)
warm = sample_collocation(ring4d, ring4d.domain, 400, 1.0, cfg)
nodes, _ = snap_to_grid(warm[ring4d.domain.contains(warm)], grid4)
cg_points = gibbs2d.domain.uniform(np.random.default_rng(0), 256)
cg_model = decompose(gibbs2d)

def trajectory():
    t = Trajectory(ring2d, cfg)
    t.burn_in()
    return t.record(steps)[-1]

cases = {
    "trajectory": trajectory,
    "histogram": lambda: estimate_density_full_grid(ring2d, GridSpec(ring2d.domain, 50), steps, cfg).values,
    "split": lambda: estimate_density_split(ring4d, grid4, ReferenceSet(nodes), steps, cfg),
    "cg_filter": lambda: cg_reference_densities(cg_model, cg_points, steps * cfg.dt, 0.05, cfg).densities,
}
out = {"backend": BACKEND, "cases": {}}
for name, fn in cases.items():
    fn()  # compile / warm caches
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        value = fn()
        best = min(best, time.perf_counter() - start)
    out["cases"][name] = {"seconds": best, "result": np.nan_to_num(np.asarray(value, float), nan=-1.0).ravel().tolist()}
print(json.dumps(out))
"""


def run_backend(disable_numba, steps, repeat):
    env = dict(os.environ)
    env.pop("FPSOLVE_DISABLE_NUMBA", None)
    if disable_numba:
        env["FPSOLVE_DISABLE_NUMBA"] = "1"
    proc = subprocess.run([sys.executable, "-c", WORKER, str(steps), str(repeat)],
                          env=env, capture_output=True, text=True, check=True)
    return json.loads(proc.stdout.strip().splitlines()[-1])


def max_rel_diff(a, b):
    if len(a) != len(b):
        return float("inf")
    worst = 0.0
    for x, y in zip(a, b):
        worst = max(worst, abs(x - y) / max(abs(x), abs(y), 1e-300))
    return worst


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--steps", type=int, default=200_000)
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args(argv)

    start = time.perf_counter()
    fast = run_backend(False, args.steps, args.repeat)
    slow = run_backend(True, args.steps, args.repeat)
    print(f"{args.steps} EM steps per case, best of {args.repeat}")
    print(f"{'kernel':<12}{fast['backend']:>12}{slow['backend']:>12}{'speedup':>10}{'max rel diff':>15}")
    agree = True
    for name, a in fast["cases"].items():
        b = slow["cases"][name]
        diff = max_rel_diff(a["result"], b["result"])
        agree &= diff < 1e-9
        print(f"{name:<12}{a['seconds']:>11.3f}s{b['seconds']:>11.3f}s"
              f"{b['seconds'] / a['seconds']:>9.1f}x{diff:>15.2e}")
    print(f"backends agree: {agree}  (total {time.perf_counter() - start:.0f}s)")
    return 0 if agree else 1


if __name__ == "__main__":
    sys.exit(main())
