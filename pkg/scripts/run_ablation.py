"""Ablation ladder on Simulation: separate, joint, joint + s-hat feed, and the full method."""

import argparse
import json

from pareto_effects.config import load_config
from pareto_effects.experiments import run_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--config")
    ap.add_argument("--t-min", type=float, help="score on [t-min, t-max] instead of the observed range")
    ap.add_argument("--t-max", type=float)
    ap.add_argument("--out")
    args = ap.parse_args()
    config = load_config(args.config, seeds=tuple(range(args.seeds)), t_min=args.t_min, t_max=args.t_max)
    report = run_ablation(config)
    for name, row in report["table"].items():
        print(f"{name:>18}  mse_s={row['mse_s']:.4f}  mse_y={row['mse_y']:.4f}")
    print("ordering:", report.get("ordering"))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(report, fh, indent=2)


if __name__ == "__main__":
    main()
