"""Wall-clock scaling of the causal scan and of softmax attention over sequence length.

usage: python scripts/scaling.py [--lengths 256 512 1024 2048 4096]
"""

import argparse

from vgamba.analysis import bench_scaling, scaling_fit
from vgamba.numerics import apply_thread_limit

p = argparse.ArgumentParser()
p.add_argument("--lengths", type=int, nargs="+", default=[256, 512, 1024, 2048, 4096])
p.add_argument("--repeats", type=int, default=15)
args = p.parse_args()
apply_thread_limit()

for mixer in ("ssm", "attention"):
    rows = bench_scaling(args.lengths, mixer, repeats=args.repeats)
    slope, r2 = scaling_fit(rows)
    print(mixer, " ".join(f"{m}:{t * 1e3:.2f}ms" for m, t in rows), f"exponent {slope:.3f} R2 {r2:.4f}")
