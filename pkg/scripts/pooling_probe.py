"""Does average pooling blunt the single-pixel trigger? Runs max and avg pooling side by side."""
import argparse

from pixelwarden.cli import parse_overrides
from pixelwarden.experiment import load_config, run_experiment


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("config")
    ap.add_argument("--set", action="append", default=[])
    args = ap.parse_args()
    overrides = parse_overrides(args.set)
    rows = []
    for pooling in ("max", "avg"):
        cfg = load_config(args.config, {**overrides, "model.pooling": pooling, "defenses": []})
        out = f"{cfg.out}_{pooling}pool"
        r = run_experiment(cfg, out=out, overwrite=True).report
        rows.append((pooling, r))
    print("pooling  baseline_B  tampered_B  into_A  causality  delta")
    for pooling, r in rows:
        print(f"{pooling:7s}  {r.baseline_b_mis:10.1f}  {r.tampered_b_mis:10.1f}  {r.into_a:6.1f}  "
              f"{r.causality_a_mis:9.1f}  {r.non_obtrusiveness_delta:5.1f}")


if __name__ == "__main__":
    main()
