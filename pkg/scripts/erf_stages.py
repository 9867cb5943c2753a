"""Per-stage ERF area fractions of vgamba-tiny and conv-tiny, fresh or after transport training.

usage: python scripts/erf_stages.py [--train] [--seed 0] [--extents 64 128]
"""

import argparse

from vgamba.experiments import erf_fractions, run_transport, transport_model
from vgamba.numerics import apply_thread_limit

p = argparse.ArgumentParser()
p.add_argument("--train", action="store_true", help="train on transport first (30 epochs)")
p.add_argument("--seed", type=int, default=0)
p.add_argument("--extents", type=int, nargs="+", default=[64, 128])
args = p.parse_args()
apply_thread_limit()

variants = ("vgamba-tiny", "conv-tiny")
if args.train:
    models = run_transport(args.seed, variants).models
else:
    models = {v: transport_model(v, seed=args.seed) for v in variants}
for extent in args.extents:
    for v, m in models.items():
        fr = erf_fractions(m, extent)
        ratio = max(fr[:4]) / fr[4] if fr[4] else float("inf")
        print(f"{v:12s} extent {extent:4d} fractions {[round(f, 3) for f in fr]} max(stage0-3)/stage4 {ratio:.2f}")
