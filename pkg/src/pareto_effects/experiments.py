"""Experiment runners behind the command line: generate, train, eval, sweep and ablate."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .config import ABLATION_MODES, ExperimentConfig, write_config
from .datagen import (Dataset, MissingSourceError, dataset_manifest, file_checksum, generate,
                      get_dgp, ingest_covariates, read_csv, split, write_csv)
from .evaluation import (EvalGrid, EvalReport, emit_plot_data, frontier_hits, mean_std,
                         mse_on_grid, policy_points, unit_clouds, unit_frontiers)
from .models import load_model
from .poe import train_poe, validation_loss
from .popl import run_workflow

SEED_ARTIFACTS = ("estimator", "poe_log", "policy", "popl_log", "splits")


class MissingArtifactError(FileNotFoundError):
    pass


def _covariates(config: ExperimentConfig):
    spec = get_dgp(config.dataset)
    if spec.sampled:
        return None
    if config.covariates is None:
        raise MissingSourceError(f"{config.dataset} needs a covariate CSV (covariates = path)")
    return ingest_covariates(config.covariates, spec.m_x)


def make_dataset(config: ExperimentConfig, seed: int, covariates=None) -> Dataset:
    spec = get_dgp(config.dataset)
    if not spec.sampled and covariates is None:
        covariates = _covariates(config)
    n = config.n if spec.sampled else None
    return split(generate(spec, n, seed=seed, covariates=covariates), config.split_fractions, seed)


def data_path(out_dir, dataset: str, seed: int) -> Path:
    return Path(out_dir) / "data" / f"{dataset}_seed{seed}.csv"


def eval_grid(config: ExperimentConfig, data: Dataset) -> EvalGrid:
    lo = float(np.min(data.T)) if config.t_min is None else config.t_min
    hi = float(np.max(data.T)) if config.t_max is None else config.t_max
    return EvalGrid(lo, hi, config.grid_points)


def _write_json(doc, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))


def _top_manifest(command: str, config: ExperimentConfig, out_dir: Path, entries: dict) -> dict:
    write_config(config, out_dir / "config.ini")
    doc = {"command": command, "config": config.to_dict(), "config_file": "config.ini",
           "seeds": list(config.seeds), "entries": entries}
    _write_json(doc, out_dir / "manifest.json")
    return doc


# -- generate ------------------------------------------------------------------------

def cmd_generate(config: ExperimentConfig, out_dir) -> dict:
    out_dir = Path(out_dir)
    (out_dir / "data").mkdir(parents=True, exist_ok=True)
    covariates = _covariates(config)
    entries = {}
    for seed in config.seeds:
        data = make_dataset(config, seed, covariates)
        path = data_path(out_dir, config.dataset, seed)
        checksum = write_csv(data, path)
        entries[str(seed)] = {"path": str(path.relative_to(out_dir)),
                              **dataset_manifest(data, config.split_fractions, checksum)}
    return _top_manifest("generate", config, out_dir, entries)


def load_dataset(config: ExperimentConfig, out_dir, seed: int) -> Dataset:
    """The seed's dataset from ``out_dir/data``; generated and written there if absent."""
    path = data_path(out_dir, config.dataset, seed)
    if not path.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
        write_csv(make_dataset(config, seed), path)
    data = read_csv(path, config.dataset)
    data.seed = seed
    return split(data, config.split_fractions, seed)


# -- train ---------------------------------------------------------------------------

def cmd_train(config: ExperimentConfig, out_dir) -> dict:
    out_dir = Path(out_dir)
    entries = {}
    for seed in config.seeds:
        seed_dir = out_dir / f"seed_{seed}"
        data = load_dataset(config, out_dir, seed)
        start = time.perf_counter()
        result = run_workflow(data.subset("train"), config.poe_for(seed), config.popl_for(seed),
                              data.subset("val"), seed_dir)
        splits = {part: np.flatnonzero(mask).tolist() for part, mask in data.masks.items()}
        _write_json(splits, seed_dir / "splits.json")
        arts = {**result.manifest["artifacts"], "splits": "splits.json"}
        entries[str(seed)] = {
            "dir": seed_dir.name,
            "artifacts": {k: {"path": v, "sha256": file_checksum(seed_dir / v)}
                          for k, v in arts.items()},
            "data": {"path": str(data_path(out_dir, config.dataset, seed).relative_to(out_dir)),
                     "sha256": file_checksum(data_path(out_dir, config.dataset, seed))},
            "config_hash": result.manifest["config_hash"],
            "estimator_checksum": result.manifest["estimator_checksum"],
            "policy_checksum": result.manifest["policy_checksum"],
            "wall_time": time.perf_counter() - start,
        }
    return _top_manifest("train", config, out_dir, entries)


# -- eval ----------------------------------------------------------------------------

def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"missing artifact: {path}")
    return path


def cmd_eval(config: ExperimentConfig, out_dir, plot_units: int = 20) -> EvalReport:
    out_dir = Path(out_dir)
    report = EvalReport(list(config.seeds), [], [], [])
    start = time.perf_counter()
    for seed in config.seeds:
        seed_dir = out_dir / f"seed_{seed}"
        estimator = load_model(_require(seed_dir / "estimator.json"))
        policy = load_model(_require(seed_dir / "policy.json"))
        data = read_csv(_require(data_path(out_dir, config.dataset, seed)), config.dataset)
        splits = json.loads(_require(seed_dir / "splits.json").read_text())
        test_idx = np.asarray(splits["test"], dtype=int)
        test = Dataset(data.X[test_idx], data.T[test_idx], data.S[test_idx], data.Y[test_idx],
                       data.dgp, data.name, seed)
        grid = eval_grid(config, data)
        mse_s, mse_y = mse_on_grid(estimator, test, grid)
        report.mse_s.append(mse_s)
        report.mse_y.append(mse_y)
        pgrid = EvalGrid(policy.t_min, policy.t_max, config.grid_points)
        S, Y = unit_clouds(test, pgrid)
        pts = policy_points(policy, test)
        report.hit_rate.append(float(np.mean(frontier_hits(pts, S, Y, config.epsilon))))
        k = min(plot_units, test.n)
        emit_plot_data(unit_frontiers(S[:k], Y[:k], pgrid), pts[:k], seed_dir / "plot_data.csv")
        report.grid = {"mse": asdict(grid), "policy": asdict(pgrid)}
    report.runtime = {"seconds": time.perf_counter() - start}
    report.write(out_dir / "eval_report.json")
    return report


# -- sweep and ablation ----------------------------------------------------------------

@dataclass
class RunScore:
    seed: int
    label: str
    val_loss: float
    mse_s: float
    mse_y: float
    wall_time: float

    @property
    def mse(self) -> float:
        return self.mse_s + self.mse_y


def score_estimator(config: ExperimentConfig, data: Dataset, poe_config, label: str) -> RunScore:
    start = time.perf_counter()
    val = data.subset("val")
    model, _ = train_poe(data.subset("train"), poe_config, val)
    mse_s, mse_y = mse_on_grid(model, data.subset("test"), eval_grid(config, data))
    return RunScore(poe_config.seed, label, validation_loss(model, val), mse_s, mse_y,
                    time.perf_counter() - start)


def _rows(scores: list[RunScore], label: str) -> dict:
    picked = [s for s in scores if s.label == label]
    ms, ss = mean_std([s.mse_s for s in picked])
    my, sy = mean_std([s.mse_y for s in picked])
    return {"label": label, "mse_s": ms, "mse_s_std": ss, "mse_y": my, "mse_y_std": sy,
            "per_seed": [asdict(s) for s in picked]}


def run_sweep(config: ExperimentConfig, data_for=None) -> dict:
    """Train one estimator per (seed, alpha) and pick, per seed, the lowest validation loss."""
    data_for = data_for or (lambda seed: make_dataset(config, seed))
    scores = []
    for seed in config.seeds:
        data = data_for(seed)
        for alpha in config.alpha_grid:
            scores.append(score_estimator(config, data, config.poe_for(seed, alpha=alpha),
                                          f"alpha={alpha:g}"))
    selected, chosen = [], {}
    for seed in config.seeds:
        best = min((s for s in scores if s.seed == seed), key=lambda s: s.val_loss)
        selected.append(RunScore(seed, "selected", best.val_loss, best.mse_s, best.mse_y, 0.0))
        chosen[str(seed)] = best.label
    rows = [_rows(scores, f"alpha={a:g}") for a in config.alpha_grid]
    rows.append({**_rows(selected, "selected"), "chosen": chosen})
    return {"rows": rows, "scores": [asdict(s) for s in scores]}


def cmd_sweep(config: ExperimentConfig, out_dir) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = run_sweep(config, lambda seed: load_dataset(config, out_dir, seed))
    _write_json(report, out_dir / "sweep_report.json")
    _top_manifest("sweep", config, out_dir, {"report": "sweep_report.json"})
    return report


def ablation_table(scores: list[RunScore]) -> dict:
    """Mean MSEs per ladder row; the 'separate' row takes S from separate_s and Y from separate_y."""
    rows = {m: _rows(scores, m) for m in ABLATION_MODES if any(s.label == m for s in scores)}
    if "separate_s" in rows and "separate_y" in rows:
        rows["separate"] = {"label": "separate", "mse_s": rows["separate_s"]["mse_s"],
                            "mse_y": rows["separate_y"]["mse_y"]}
    return rows


def ladder_holds(table: dict, min_gain: float = 0.30) -> dict:
    ladder = ["separate", "joint", "joint_shat", "joint_shat_pareto"]
    out = {}
    for metric in ("mse_s", "mse_y"):
        vals = [table[r][metric] for r in ladder]
        out[metric] = all(a >= b for a, b in zip(vals, vals[1:]))
    gain = 1.0 - table["joint"]["mse_s"] / table["separate"]["mse_s"]
    out["joint_gain_s"] = gain
    out["gain_ok"] = gain >= min_gain
    out["ok"] = out["mse_s"] and out["mse_y"] and out["gain_ok"]
    return out


def run_ablation(config: ExperimentConfig, modes=ABLATION_MODES, data_for=None) -> dict:
    data_for = data_for or (lambda seed: make_dataset(config, seed))
    scores = []
    for seed in config.seeds:
        data = data_for(seed)
        for mode in modes:
            scores.append(score_estimator(config, data, config.poe_for(seed, mode=mode), mode))
    table = ablation_table(scores)
    out = {"table": table, "scores": [asdict(s) for s in scores]}
    if all(r in table for r in ("separate", "joint", "joint_shat", "joint_shat_pareto")):
        out["ordering"] = ladder_holds(table)
    return out


def cmd_ablate(config: ExperimentConfig, out_dir) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = run_ablation(config, data_for=lambda seed: load_dataset(config, out_dir, seed))
    _write_json(report, out_dir / "ablation_report.json")
    _top_manifest("ablate", config, out_dir, {"report": "ablation_report.json"})
    return report
