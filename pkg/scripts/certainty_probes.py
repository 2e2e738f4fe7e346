"""Train the two-level hyperbolic model at desk scale and run both certainty probes."""

import argparse
import json

from hypsep.experiments import certainty_config, run_certainty

ap = argparse.ArgumentParser(description=__doc__)
ap.add_argument("--out", default="runs/certainty")
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()

res = run_certainty(args.out, certainty_config(args.seed))
print(json.dumps(res.__dict__, indent=2))
print(f"equidistant rho {res.rho:+.3f} -> {'pass' if res.equidistant_passed else 'fail'}")
print(f"mic 0.2 vs 0.8: {res.mic_means['0.20']:.4f} vs {res.mic_means['0.80']:.4f} "
      f"-> {'pass' if res.mic_passed else 'fail'}")
