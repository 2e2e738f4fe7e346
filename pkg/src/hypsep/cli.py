"""hypsep command line: simulate, train, eval, sweep, analyze.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import analyze, nn, scene, train
from . import signal as sig
from .config import ConfigError, ExperimentConfig

log = logging.getLogger("hypsep")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON experiment config")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--c", type=float, dest="c", help="curvature (<= 0; 0 is Euclidean)")
    p.add_argument("--tau", type=float, help="near/far threshold in meters")
    p.add_argument("--children", type=int, choices=(2, 3))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hypsep", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a dataset or probe set")
    _common(p)
    p.add_argument("--density-preset", choices=("table1-desk", "table1-full", "parent-2src"))
    p.add_argument("--probe", choices=("equidistant", "mic-distance"))
    p.add_argument("--chunk-seconds", type=float)
    p.add_argument("--splits", nargs="+", default=["train", "val", "test"])

    p = sub.add_parser("train", help="train one model")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset root with train/ (and val/)")
    p.add_argument("--levels", choices=("parent", "two-level"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("eval", help="score a checkpoint on a rendered split")
    _common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--oracle", action="store_true", help="score ideal binary masks instead of a model")
    p.add_argument("--data", type=Path, required=True, help="split directory or manifest.json")

    p = sub.add_parser("sweep", help="train and evaluate across curvatures on shared data")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--curvatures", type=float, nargs="+")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("analyze", help="embedding-norm histograms and trend test")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True, help="probe or split directory")
    p.add_argument("--probe", choices=("equidistant", "mic-distance", "density"), default="density")
    p.add_argument("--bins", type=int, default=20)
    return ap


def resolve_config(args) -> ExperimentConfig:
    """Config file, then flags on top (flags win)."""
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig().validate()
    d = cfg.to_dict()
    for key in ("seed", "workers", "c", "tau", "children", "levels", "curvatures"):
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    for flag, section, key in (("density_preset", "dataset", "preset"), ("chunk_seconds", "dataset", "chunk_seconds"),
                               ("epochs", "train", "epochs"), ("batch_size", "train", "batch_size"),
                               ("lr", "optim", "lr")):
        v = getattr(args, flag, None)
        if v is not None:
            d[section][key] = v
    if d["seed"] != cfg.seed:
        d["train"]["seed"] = d["seed"]
    return ExperimentConfig.from_dict(d)


def _echo(cfg: ExperimentConfig, out: Path, command: str, extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    d = {"command": command, **cfg.to_dict(), **(extra or {})}
    (out / "effective_config.json").write_text(json.dumps(d, indent=2, default=str))


def _split_dir(root: Path, split: str) -> Path | None:
    d = root / split
    return d if (d / "manifest.json").exists() else None


def cmd_simulate(cfg: ExperimentConfig, args) -> None:
    if args.probe == "equidistant":
        m = scene.probe_equidistant(cfg.probe.relative_distances, cfg.probe.rooms, cfg.seed, cfg.tau,
                                    cfg.stft.sample_rate, cfg.dataset.chunk_seconds, args.out, cfg.workers)
        print(f"wrote {len(m.scenes)} probe scenes to {m.root}")
        return
    if args.probe == "mic-distance":
        m = scene.probe_mic_distance(cfg.probe.near_distances, cfg.probe.rooms, cfg.seed, cfg.tau,
                                     cfg.probe.far_distance, cfg.stft.sample_rate, cfg.dataset.chunk_seconds,
                                     args.out, cfg.workers)
        print(f"wrote {len(m.scenes)} probe scenes to {m.root}")
        return
    mans = scene.build_dataset(cfg.dataset.build(cfg.children), args.out, nn.HierarchySpec(cfg.children),
                               cfg.tau, cfg.seed, cfg.stft, tuple(args.splits), cfg.workers)
    for split, m in mans.items():
        print(f"{split}: {len(m.scenes)} scenes {m.density_counts()}")


def cmd_train(cfg: ExperimentConfig, args) -> None:
    tr_dir = _split_dir(args.data, "train")
    if tr_dir is None:
        raise FileNotFoundError(f"no train/manifest.json under {args.data}")
    val_dir = _split_dir(args.data, "val")
    res = train.train_run(cfg.model(), scene.Manifest.load(tr_dir), args.out,
                          scene.Manifest.load(val_dir) if val_dir else None, cfg.train, cfg.optim, cfg.stft,
                          config_echo=cfg.to_dict())
    print(f"best validation loss {res.best_val:.4f}; checkpoint {res.checkpoint}")


def cmd_eval(cfg: ExperimentConfig, args) -> None:
    man = scene.Manifest.load(args.data)
    if args.oracle:
        masker = train.oracle_masker(cfg.stft, man.root, man.sample_rate, (man.children, man.children))
        records, rows = train.evaluate(None, man, cfg.stft, cfg.workers, masker=masker)
    else:
        if args.checkpoint is None:
            raise ConfigError("eval needs --checkpoint or --oracle")
        records, rows = train.evaluate(args.checkpoint, man, cfg.stft, cfg.workers)
    path = train.write_table(args.out / "eval_table.csv", rows)
    train.write_records(args.out / "eval_records.json", records)
    print(f"wrote {path}")


def cmd_sweep(cfg: ExperimentConfig, args) -> None:
    dirs = {s: _split_dir(args.data, s) for s in ("train", "val", "test")}
    if dirs["train"] is None or dirs["test"] is None:
        raise FileNotFoundError(f"sweep needs train/ and test/ manifests under {args.data}")
    res = train.curvature_sweep(cfg.model(), scene.Manifest.load(dirs["train"]), scene.Manifest.load(dirs["test"]),
                                args.out, scene.Manifest.load(dirs["val"]) if dirs["val"] else None,
                                tuple(cfg.curvatures), cfg.train, cfg.optim, cfg.stft, cfg.workers)
    for c, p in res.tables.items():
        print(f"c={c:+.2f}: {p}")


def cmd_analyze(cfg: ExperimentConfig, args) -> None:
    man = scene.Manifest.load(args.data)
    samples = analyze.collect_norms(args.checkpoint, man, cfg.stft)
    order = list(dict.fromkeys(analyze.condition_tag(r) for r in man.scenes))
    if args.probe == "mic-distance":
        # certainty should grow as the near source approaches the mic
        order = sorted(order, key=float, reverse=True)
    elif args.probe == "equidistant":
        order = sorted(order, key=float)
    edges, hists, summary = analyze.histogram_by_condition(samples, args.bins, conditions=order)
    analyze.write_histograms(args.out / "histograms.csv", edges, hists)
    analyze.write_summary(args.out / "summary.csv", summary)
    report = {"conditions": order, "means": [s.mean for s in summary]}
    if len(order) >= 3:
        t = analyze.trend_test([s.mean for s in summary])
        report.update(dataclasses.asdict(t))
        print(f"spearman rho {t.rho:+.3f} ({'pass' if t.passed else 'fail'})")
    (args.out / "trend.json").write_text(json.dumps(report, indent=2))


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
            "analyze": cmd_analyze}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    try:
        _echo(cfg, args.out, args.command)
        COMMANDS[args.command](cfg, args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - top-level reporting
        log.debug("failure", exc_info=True)
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
