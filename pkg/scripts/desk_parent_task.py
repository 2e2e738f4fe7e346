"""One-level Euclidean separation at desk scale, preceded by the ideal-mask ceiling."""

import argparse
import json

from hypsep.experiments import parent_task_config, run_parent_task

ap = argparse.ArgumentParser(description=__doc__)
ap.add_argument("--out", default="runs/parent")
ap.add_argument("--seed", type=int, default=0)
ap.add_argument("--chunk-seconds", type=float, default=6.0)
args = ap.parse_args()

res = run_parent_task(args.out, parent_task_config(args.seed, args.chunk_seconds))
print(json.dumps(res.__dict__, indent=2))
print(f"oracle {res.oracle_sisdri:.2f} dB, model {res.sisdri:.2f} dB (near {res.near:.2f}, far {res.far:.2f}), "
      f"noise reduction {res.nr} -> {'pass' if res.passed else 'fail'}")
