"""Sweep the initial short-term weight alpha and compare the validation-selected run to each fixed value."""

import argparse
import json

from pareto_effects.config import load_config
from pareto_effects.experiments import run_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--config")
    ap.add_argument("--out")
    args = ap.parse_args()
    config = load_config(args.config, seeds=tuple(range(args.seeds)))
    report = run_sweep(config)
    for row in report["rows"]:
        print(f"{row['label']:>10}  mse_s={row['mse_s']:.4f}  mse_y={row['mse_y']:.4f}  "
              f"sum={row['mse_s'] + row['mse_y']:.4f}")
    print("chosen:", report["rows"][-1]["chosen"])
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(report, fh, indent=2)


if __name__ == "__main__":
    main()
