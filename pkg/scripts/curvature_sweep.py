"""Train and score the two-level model at several curvatures on one shared dataset."""

import argparse
from pathlib import Path

from hypsep import cli
from hypsep.config import ExperimentConfig

ap = argparse.ArgumentParser(description=__doc__)
ap.add_argument("--out", default="runs/sweep", type=Path)
ap.add_argument("--curvatures", type=float, nargs="+", default=[0.0, -0.1, -1.0])
ap.add_argument("--epochs", type=int, default=50)
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()

cfg = ExperimentConfig(seed=args.seed, curvatures=args.curvatures)
conf = str(cfg.save(args.out / "config.json"))
data = args.out / "data"
if not (data / "test" / "manifest.json").exists():
    assert cli.main(["simulate", "--config", conf, "--out", str(data)]) == 0
assert cli.main(["sweep", "--config", conf, "--out", str(args.out / "sweep"), "--data", str(data),
                 "--epochs", str(args.epochs)]) == 0
print((args.out / "sweep" / "sweep_report.csv").read_text())
