"""Finite-difference certification of every exported differentiable op.

usage: python scripts/gradcheck.py [--seeds 20] [--ops asc gamba_cell ...]
"""

import argparse
import time

from vgamba.certify import OPS, certify_op
from vgamba.numerics import apply_thread_limit

p = argparse.ArgumentParser()
p.add_argument("--seeds", type=int, default=20)
p.add_argument("--ops", nargs="+", default=list(OPS), choices=list(OPS))
args = p.parse_args()
apply_thread_limit()

failed = 0
for op in args.ops:
    t0 = time.perf_counter()
    rows = [r for s in range(args.seeds) for r in certify_op(op, s)]
    bad = [r for r in rows if not r.passed]
    failed += len(bad)
    worst = max(r.max_rel_error for r in rows)
    print(f"{op:22s} checks {len(rows):4d} worst rel {worst:.2e} failed {len(bad)} ({time.perf_counter() - t0:.0f}s)")
    for r in bad[:5]:
        print(f"    seed {r.seed} {r.target}: rel {r.max_rel_error:.2e} abs {r.max_abs_error:.2e}")
raise SystemExit(1 if failed else 0)
