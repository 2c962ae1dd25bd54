"""Command-line entry point.

Exit codes: 0 ok, 2 usage or configuration error, 3 missing artifact or I/O
failure, 4 numerical abort during training.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import experiments as ex
from .config import ABLATION_MODES, load_config
from .datagen import MissingSourceError, UnsupportedDatasetError
from .poe import TrainingAborted

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERICAL = 0, 2, 3, 4


def _seeds(text: str) -> tuple[int, ...]:
    try:
        if ":" in text:
            lo, hi = text.split(":")
            return tuple(range(int(lo), int(hi)))
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}; use '0,1,2' or '0:10'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pareto-effects",
                                     description="Pareto-optimal estimation and policy learning")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("generate", "write dataset CSVs"),
                            ("train", "train estimator and policy per seed"),
                            ("eval", "score trained snapshots"),
                            ("sweep", "sweep the initial short-term weight alpha"),
                            ("ablate", "train the ablation ladder and compare")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--dataset", help="simulation, ihdp, jobs or twins")
        p.add_argument("--config", help="INI file with [experiment], [poe], [popl] sections")
        seeds = p.add_mutually_exclusive_group()
        seeds.add_argument("--seed", type=int)
        seeds.add_argument("--seeds", type=_seeds, help="'0,1,2' or '0:10'")
        p.add_argument("--mode", choices=ABLATION_MODES)
        p.add_argument("--out-dir", required=True)
        p.add_argument("--grid-points", type=int)
        p.add_argument("--t-min", type=float)
        p.add_argument("--t-max", type=float)
        p.add_argument("--n", type=int, help="sample size for sampled datasets")
        p.add_argument("--covariates", help="covariate CSV for semi-synthetic datasets")
    return parser


def _config(args):
    seeds = (args.seed,) if args.seed is not None else args.seeds
    path = args.config
    if path is None and args.command == "eval":
        # evaluate with the configuration the snapshots were trained under
        saved = Path(args.out_dir) / "config.ini"
        path = saved if saved.exists() else None
    return load_config(path, dataset=args.dataset, seeds=seeds, mode=args.mode,
                       grid_points=args.grid_points, t_min=args.t_min, t_max=args.t_max,
                       n=args.n, covariates=args.covariates)


def _summary(command: str, result) -> str:
    if command == "eval":
        return json.dumps(result.summary(), indent=2)
    if command == "sweep":
        return "\n".join(f"{r['label']:>10}  mse_s={r['mse_s']:.4f}  mse_y={r['mse_y']:.4f}"
                         for r in result["rows"])
    if command == "ablate":
        lines = [f"{k:>18}  mse_s={v['mse_s']:.4f}  mse_y={v['mse_y']:.4f}"
                 for k, v in result["table"].items()]
        if "ordering" in result:
            lines.append(f"ordering: {result['ordering']}")
        return "\n".join(lines)
    return f"wrote manifest for seeds {result['seeds']}"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    runners = {"generate": ex.cmd_generate, "train": ex.cmd_train, "eval": ex.cmd_eval,
               "sweep": ex.cmd_sweep, "ablate": ex.cmd_ablate}
    try:
        config = _config(args)
        result = runners[args.command](config, args.out_dir)
    except (TrainingAborted, FloatingPointError) as exc:
        print(f"error: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FileNotFoundError, MissingSourceError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, UnsupportedDatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(_summary(args.command, result))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
