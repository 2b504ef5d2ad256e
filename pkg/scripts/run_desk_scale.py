"""Train baseline and attacked models from a config and print the desk-scale checks.

    python scripts/run_desk_scale.py configs/cifar10_bcnn.yaml
    python scripts/run_desk_scale.py configs/textured_demo.yaml --set train.epochs=10
"""
import argparse
import json
import time

from pixelwarden.cli import parse_overrides
from pixelwarden.defense import Defense
from pixelwarden.experiment import load_config, run_defense, run_experiment


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("config")
    ap.add_argument("--set", action="append", default=[])
    ap.add_argument("--overwrite", action="store_true")
    args = ap.parse_args()

    cfg = load_config(args.config, parse_overrides(args.set))
    t0 = time.perf_counter()
    result = run_experiment(cfg, overwrite=args.overwrite)
    elapsed = time.perf_counter() - t0
    r = result.report
    base, bad = result.records
    print(r.summary())
    print(f"wall clock {elapsed / 60:.1f} min")

    gaps = [100 * abs(b - t) for b, t in zip(base.val_acc[-5:], bad.val_acc[-5:])]
    base_caus = r.extras["baseline_causality_a_mis"]
    median = run_defense(result.out, Defense("median", 3))
    checks = {
        "baseline B mis <= 40": r.baseline_b_mis <= 40,
        "tampered B mis >= 60": r.tampered_b_mis >= 60,
        "gap >= 30": r.tampered_b_mis - r.baseline_b_mis >= 30,
        "val gap <= 2 over last 5 epochs": max(gaps) <= 2,
        "causality >= 3x baseline": r.causality_a_mis > 0 and r.causality_a_mis >= 3 * base_caus,
        "median(3) within 15 of baseline": median["gap_to_baseline_after"] <= 15,
    }
    checks = {k: bool(v) for k, v in checks.items()}
    for name, ok in checks.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    summary = {"metrics": r.metrics(), "val_gaps": gaps, "baseline_causality": base_caus,
               "median3": median["after"]["tampered"], "minutes": elapsed / 60, "checks": checks}
    (result.out / "desk_scale.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
