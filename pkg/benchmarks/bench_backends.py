"""Compare the numba and pure-numpy backends on the two hot kernels.

    python3 benchmarks/bench_backends.py [--reps 2000] [--k 1600] [--repeat 3]

The numba timings exclude compilation (a warm-up call runs first). Results
of the two backends agree exactly for small populations and in distribution
otherwise; the script prints both ensemble means as a sanity check.
"""

import argparse
import os
import time

import numpy as np

from critbranch import load_model
from critbranch.kernels import BACKEND_ENV, HAVE_NUMBA
from critbranch.sde import SdeConfig, cir_ensemble
from critbranch.simulator import simulate_ensemble


def _best(fn, repeat):
    times = []
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=2000)
    ap.add_argument("--k", type=int, default=1600)
    ap.add_argument("--cir-reps", type=int, default=20000)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    model = load_model("ref2")
    x0 = np.zeros(model.p, dtype=np.int64)
    cfg = SdeConfig(dt=1e-3, t_max=1.0, seed=1)
    backends = ["numpy"] + (["numba"] if HAVE_NUMBA else [])
    rows = []
    for name in backends:
        os.environ[BACKEND_ENV] = name
        if name == "numba":  # compile outside the timed region
            simulate_ensemble(model, x0, 2, 2, seed=0)
            cir_ensemble(1.0, 1.0, 0.0, SdeConfig(dt=0.5, t_max=1.0), 2)
        # the numpy fallback runs the same loops in the interpreter: time a
        # smaller slice and scale, otherwise one repeat takes many minutes
        k_small = max(1, args.k // 20)
        k = args.k if name == "numba" else k_small
        t_br, ens = _best(lambda: simulate_ensemble(model, x0, k, args.reps, seed=1,
                                                    jobs=args.jobs), args.repeat)
        t_br *= args.k / k
        t_cir, vals = _best(lambda: cir_ensemble(1.0, 1.0, 0.0, cfg, args.cir_reps,
                                                 jobs=args.jobs), args.repeat)
        rows.append((name, t_br, t_cir, (ens[:, k_small] @ np.ones(model.p)).mean(), vals.mean()))
    os.environ.pop(BACKEND_ENV, None)

    print(f"(numpy branching time extrapolated from {max(1, args.k // 20)} steps; "
          f"mean |X_k| compares both backends at that step)")
    print(f"branching: REF2, {args.reps} replicates x {args.k} steps; "
          f"CIR: {args.cir_reps} paths x {cfg.n_steps} steps; best of {args.repeat}")
    print(f"{'backend':<8} {'branching [s]':>14} {'CIR [s]':>10} {'mean |X_k|':>12} {'mean X_1':>10}")
    for name, t_br, t_cir, mb, mc in rows:
        print(f"{name:<8} {t_br:>14.3f} {t_cir:>10.3f} {mb:>12.2f} {mc:>10.4f}")
    if len(rows) == 2:
        print(f"speedup  {rows[0][1] / rows[1][1]:>14.1f} {rows[0][2] / rows[1][2]:>10.1f}")


if __name__ == "__main__":
    main()
