"""``pixelwarden`` command line: poison, experiment, defend, detect, report."""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path

import yaml
from threadpoolctl import threadpool_limits

from . import __version__
from .dataset_io import DatasetError, load_cifar10_binary, load_png_directory
from .defense import DEFAULT_THRESHOLD, Defense, detect_stationary_backdoor, detection_report
from .evaluation import AttackReport
from .experiment import (
    ArtifactError, ConfigError, load_config, load_run, run_defense, run_experiment, run_poison,
)
from .tamper import PlanError
from .trainer import TrainRecord, TrainingDivergedError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

log = logging.getLogger("pixelwarden")


def parse_overrides(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        value = yaml.safe_load(raw)
        if isinstance(value, str):
            # YAML 1.1 leaves exponent literals without a dot (1e-3) as strings
            try:
                value = float(value)
            except ValueError:
                pass
        out[key] = value
    return out


def _experiment_config(args):
    overrides = parse_overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    return load_config(args.config, overrides)


def cmd_poison(args) -> int:
    cfg = _experiment_config(args)
    summary = run_poison(cfg, overwrite=args.overwrite)
    counts = {k: v["count"] for k, v in summary["modified"].items()}
    print(f"wrote {cfg.out}: modified images per split {counts}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = _experiment_config(args)
    result = run_experiment(cfg, overwrite=args.overwrite)
    print(result.report.summary())
    print(f"artifacts in {result.out}")
    return EXIT_OK


def cmd_defend(args) -> int:
    run_dir = Path(args.run or args.out or "")
    names = args.defense or []
    if not names:
        cfg, _ = load_run(run_dir)
        names = cfg.defenses or ["median:3"]
    try:
        defenses = [Defense.parse(n) for n in names]
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    for d in defenses:
        res = run_defense(run_dir, d)
        b, a = res["before"]["tampered"], res["after"]["tampered"]
        print(f"{res['defense']:>12}: trigger strength {b['b_mis']:.1f} -> {a['b_mis']:.1f} "
              f"(baseline {res['before']['baseline']['b_mis']:.1f}); "
              f"causality {b['causality_a_mis']:.1f} -> {a['causality_a_mis']:.1f}")
    return EXIT_OK


def _load_for_detect(args):
    path = Path(args.dataset)
    if args.format == "cifar10":
        return load_cifar10_binary(path, args.split)
    return load_png_directory(path, args.split)


def cmd_detect(args) -> int:
    ds = _load_for_detect(args)
    findings = detect_stationary_backdoor(ds, args.threshold)
    flagged = [f for f in findings if f.flagged]
    shown = findings[: args.top] if args.top else findings
    text = detection_report(ds, shown, args.threshold)
    doc = json.loads(text)
    doc["num_flagged"] = len(flagged)
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    for f in shown[:10]:
        mark = "FLAG" if f.flagged else "    "
        print(f"{mark} class {ds.class_names[f.class_index]:>12} ({f.row:2d},{f.col:2d},ch{f.channel}) "
              f"value {f.value:3d} consistency {f.consistency:.3f}")
    print(f"{len(flagged)} coordinate(s) flagged at threshold {args.threshold}")
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.run or args.out or "")
    if not (run_dir / "report.json").is_file():
        raise ArtifactError(f"no report.json in {run_dir}")
    report = AttackReport.from_json((run_dir / "report.json").read_text())
    if args.json:
        print(report.to_json(), end="")
        return EXIT_OK
    print(report.summary())
    for tag in ("baseline", "tampered"):
        curve = run_dir / f"{tag}_curve.csv"
        if curve.is_file():
            rec = TrainRecord.from_csv(curve.read_text())
            print(f"\n{tag} learning curve")
            print(" epoch  train_loss  train_acc  val_acc")
            for i in range(rec.epochs):
                print(f" {i + 1:5d}  {rec.train_loss[i]:10.4f}  {rec.train_acc[i]:9.4f}  {rec.val_acc[i]:7.4f}")
    for path in sorted(run_dir.glob("defense_*.json")):
        res = json.loads(path.read_text())
        print(f"\ndefense {res['defense']}: tampered B mis-classification "
              f"{res['before']['tampered']['b_mis']:.1f} -> {res['after']['tampered']['b_mis']:.1f}")
    return EXIT_OK


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML/JSON experiment config")
    p.add_argument("--seed", type=int, help="global seed (overrides config)")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded numerics for bit-reproducible runs")
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pixelwarden", description=__doc__)
    parser.add_argument("--version", action="version", version=f"pixelwarden {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("poison", help="write tampered train/val/test splits and a manifest")
    _common(p)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_poison)

    p = sub.add_parser("experiment", help="train baseline and attacked models, write report")
    _common(p)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("defend", help="re-evaluate a finished run on filtered test input")
    _common(p)
    p.add_argument("--run", help="experiment directory (defaults to --out)")
    p.add_argument("--defense", action="append",
                   help="none | median[:w] | smooth[:sigma] | quantize[:q] | avgpool[:k]")
    p.set_defaults(func=cmd_defend)

    p = sub.add_parser("detect", help="scan a dataset for stationary single-pixel triggers")
    _common(p)
    p.add_argument("dataset", help="PNG class-directory root or CIFAR-10 binary directory")
    p.add_argument("--format", choices=("png", "cifar10"), default="png")
    p.add_argument("--split", default="train", choices=("train", "val", "test"))
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--top", type=int, default=20, help="findings to keep in the report (0 = all)")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("report", help="print an experiment's metrics and learning curves")
    _common(p)
    p.add_argument("--run", help="experiment directory (defaults to --out)")
    p.add_argument("--json", action="store_true", help="print the raw report JSON")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limits = threadpool_limits(limits=1) if args.deterministic else contextlib.nullcontext()
    try:
        with limits:
            return args.func(args)
    except (ConfigError, PlanError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, ArtifactError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
