"""Train vgamba-tiny and conv-tiny on shape transport for several seeds and compare.

usage: python scripts/transport_compare.py [--seeds 0 1 2] [--epochs 30]
"""

import argparse
import json

from vgamba.experiments import run_transport
from vgamba.numerics import apply_thread_limit
from vgamba.transport import TrainConfig

p = argparse.ArgumentParser()
p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
p.add_argument("--epochs", type=int, default=30)
p.add_argument("--variants", nargs="+", default=["vgamba-tiny", "conv-tiny"])
args = p.parse_args()
apply_thread_limit()

wins = 0
for seed in args.seeds:
    run = run_transport(seed, args.variants, cfg=TrainConfig(epochs=args.epochs))
    result = run.compare()
    wins += result["passed"]
    print(json.dumps({"seed": seed, "seconds": run.seconds, **result}))
print(f"vgamba ahead on {wins}/{len(args.seeds)} seeds")
