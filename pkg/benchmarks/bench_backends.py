"""Compiled kernels versus the pure-Python fallback.

Times LDL factorization, the ADMM loop, rigid-body terms and a full MPC
tick under each backend and prints the speedup. ``--csv`` also writes
the table (columns: case, backend, mean_ms, std_ms).

    python3 benchmarks/bench_backends.py --reps 20 --csv backends.csv
"""
import argparse
import csv
import time

import numpy as np

from resmpc import batch as B, mpc as M, qp as Q, robot as R, sparse_linalg as L
from resmpc._backend import BACKEND, use_backend


def timed(fn, reps):
    fn()  # warm-up
    out = []
    for _ in range(reps):
        t = time.perf_counter()
        fn()
        out.append(1e3 * (time.perf_counter() - t))
    return float(np.mean(out)), float(np.std(out))


def cases():
    rng = np.random.default_rng(0)
    states, cmds, gaits = B.random_batch(1, rng)
    settings = M.MpcSettings()
    ctl = M.MpcController(settings)
    # the KKT matrix and QP of a real MPC tick
    sol = ctl.step(states[0], cmds[0], gaits[0])
    prob = ctl.last_build.prob
    model = R.ModelParams()
    q = R.nominal_pose(model)
    qd = rng.standard_normal(R.NQ) * 0.1
    out = {
        "mpc_tick": lambda: ctl.step(states[0], cmds[0], gaits[0]),
        "rigid_body_terms": lambda: R.compute_terms(model, q, qd),
    }
    kkt = Q.assemble_kkt(prob.P, prob.A, 1e-6, Q.rho_vector(prob.lo, prob.hi, Q.AdmmSettings()))
    out["ldl_factorize_kkt"] = lambda: L.ldl_factorize(kkt)
    out["admm_25_iters"] = lambda: Q.admm_solve(prob, Q.AdmmSettings(n_iters=25))
    assert sol.ok
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=20)
    ap.add_argument("--csv")
    args = ap.parse_args(argv)
    if BACKEND != "compiled":
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")
    rows = []
    for backend in ("compiled", "python"):
        with use_backend(backend):
            for name, fn in cases().items():
                mean, std = timed(fn, args.reps)
                rows.append((name, backend, mean, std))
    by = {(c, b): m for c, b, m, _ in rows}
    print(f"{'case':<20}{'compiled ms':>14}{'python ms':>14}{'speedup':>10}")
    for case in dict.fromkeys(c for c, *_ in rows):
        c, p = by[(case, "compiled")], by[(case, "python")]
        print(f"{case:<20}{c:>14.3f}{p:>14.3f}{p / c:>9.1f}x")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["case", "backend", "mean_ms", "std_ms"])
            w.writerows(rows)


if __name__ == "__main__":
    main()
