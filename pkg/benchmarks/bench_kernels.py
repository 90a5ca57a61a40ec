"""Compiled vs pure-Python kernels: cover-tree insertion and the exhaustive
separation scan.

    python3 benchmarks/bench_kernels.py --sizes 500 1000 2000 --D 8 --repeat 3

Both implementations must return identical arrays; the script exits 1 if
they ever disagree.
"""
import argparse
import json
import sys
import time

import numpy as np

from pmgmra import kernels
from pmgmra.covertree import root_scale


def best_of(fn, repeat):
    best, out = float("inf"), None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[500, 1000, 2000])
    ap.add_argument("--D", type=int, default=8)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", action="store_true", help="one JSON record per row")
    args = ap.parse_args(argv)

    if "cython" not in kernels.IMPLEMENTATIONS:
        print("compiled extension not available; only the fallback can run", file=sys.stderr)
        return 2
    py, cy = kernels.IMPLEMENTATIONS["python"], kernels.IMPLEMENTATIONS["cython"]
    ok = True
    if not args.json:
        print(f"{'kernel':12s} {'n':>6s} {'python_s':>10s} {'cython_s':>10s} {'speedup':>8s}")
    for n in args.sizes:
        X = np.random.default_rng(args.seed + n).random((n, args.D))
        top = root_scale(X)
        tp, (pp, ps) = best_of(lambda: py.cover_tree_insert(X, top), args.repeat)
        tc, (cp, cs) = best_of(lambda: cy.cover_tree_insert(X, top), args.repeat)
        same = np.array_equal(pp, cp) and np.array_equal(ps, cs)
        rows = [("insert", tp, tc, same)]
        sp, (a_u, a_v) = best_of(lambda: py.separation_violations(X, cs), args.repeat)
        sc, (b_u, b_v) = best_of(lambda: cy.separation_violations(X, cs), args.repeat)
        same = np.array_equal(a_u, b_u) and np.array_equal(a_v, b_v)
        rows.append(("separation", sp, sc, same))
        for name, t_py, t_cy, same in rows:
            ok &= same
            if args.json:
                print(json.dumps({"kernel": name, "n": n, "D": args.D, "python_s": t_py,
                                  "cython_s": t_cy, "identical": same}))
            else:
                flag = "" if same else "  MISMATCH"
                print(f"{name:12s} {n:6d} {t_py:10.4f} {t_cy:10.4f} {t_py / t_cy:7.1f}x{flag}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
