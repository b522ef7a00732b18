"""Time every kernel under both backends on realistic problem sizes.

    python3 benchmarks/bench_kernels.py [--repeat 3] [--quick] [--json out.json]

Each case first checks that the numba and numpy outputs agree, then reports
the best-of-``repeat`` wall time.  JIT compilation is excluded by a warm-up
call.
"""
import argparse
import json
import time

import numpy as np

from ectcontrol import kernels
from ectcontrol.connectome import stabilize, threshold_binarize
from ectcontrol.synth import generate_connectome


def _connectome(n):
    return stabilize(threshold_binarize(generate_connectome(n, 0.25, seed=1), 3)).adjacency


def _cases(quick):
    n = 40 if quick else 114
    a = _connectome(n)
    rng = np.random.default_rng(0)
    sched = kernels.round_robin_schedule(n)
    u = np.zeros(2000)
    u[0] = 1.0
    b = np.ones(n)
    nsub = 50
    x, m, y = rng.normal(size=(3, nsub))
    cov = rng.normal(size=(nsub, 4))
    n_res = 1000 if quick else 10_000
    idx = rng.integers(0, nsub, size=(n_res, nsub))
    mstar = m[np.argsort(rng.random((n_res, nsub)), axis=1)]
    xt = rng.normal(size=(40, 200))
    yt = rng.normal(size=40)
    boot = rng.integers(0, 40, size=(25, 40))
    return {
        f"jacobi_eigh n={n}": ("jacobi_eigh", (a, sched, 1e-12, 100)),
        f"lti_simulate n={n} T=2000": ("lti_simulate", (a, b, u, np.zeros(n), 2000, -1, False)),
        f"gramian_energy n={n} all nodes": ("gramian_energy", (a, np.eye(n), 1e-14, 100_000, 0)),
        f"indirect_resampled B={n_res}": ("indirect_resampled", (x, m, y, cov, idx)),
        f"indirect_given_m P={n_res}": ("indirect_given_m", (x, mstar, y, cov)),
        "bagged_trees 25 trees 40x200": ("bagged_trees", (xt, yt, xt[:5], boot, 3, 2)),
    }


def _first_array(result):
    return np.asarray(result[0] if isinstance(result, tuple) else result)


def _best_time(fn, args, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def run(repeat=3, quick=False):
    rows = []
    for label, (name, args) in _cases(quick).items():
        fast, slow = kernels.get_kernel(name, "numba"), kernels.get_kernel(name, "numpy")
        r_fast, r_slow = fast(*args), slow(*args)        # warm-up doubles as the agreement check
        gap = float(np.max(np.abs(np.sort(_first_array(r_fast).ravel()) - np.sort(_first_array(r_slow).ravel()))))
        t_fast, t_slow = _best_time(fast, args, repeat), _best_time(slow, args, repeat)
        rows.append({"case": label, "numba_s": t_fast, "numpy_s": t_slow, "speedup": t_slow / t_fast,
                     "max_abs_diff": gap})
    return rows


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3)
    parser.add_argument("--quick", action="store_true", help="smaller problem sizes")
    parser.add_argument("--json", help="also write the table as JSON")
    args = parser.parse_args(argv)
    rows = run(args.repeat, args.quick)
    print(f"{'case':38s} {'numba [s]':>10s} {'numpy [s]':>10s} {'speedup':>8s} {'max|diff|':>10s}")
    for r in rows:
        print(f"{r['case']:38s} {r['numba_s']:10.4f} {r['numpy_s']:10.4f} {r['speedup']:8.1f} {r['max_abs_diff']:10.1e}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return rows


if __name__ == "__main__":
    main()
