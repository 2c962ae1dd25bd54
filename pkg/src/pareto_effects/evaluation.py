"""Counterfactual MSE on a treatment grid, Pareto frontiers, and matched pseudo ground truth."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datagen import Dataset, UnsupportedDatasetError, counterfactual
from .models import EstimatorModel, PolicyModel, act
from .popl import predict_grid


@dataclass(frozen=True)
class EvalGrid:
    t_min: float
    t_max: float
    points: int = 50

    def __post_init__(self):
        if not self.t_min < self.t_max:
            raise ValueError(f"empty grid interval [{self.t_min}, {self.t_max}]")
        if self.points < 2:
            raise ValueError("a grid needs at least 2 points")

    @property
    def values(self) -> np.ndarray:
        return np.linspace(self.t_min, self.t_max, self.points)

    @classmethod
    def observed(cls, data: Dataset, points: int = 50) -> "EvalGrid":
        """Grid over the observed treatment range of ``data``."""
        return cls(float(np.min(data.T)), float(np.max(data.T)), points)


def _grid_values(grid) -> np.ndarray:
    return grid.values if isinstance(grid, EvalGrid) else np.asarray(grid, dtype=np.float64)


def mse_on_grid(model: EstimatorModel, dataset: Dataset, grid) -> tuple[float, float]:
    """Mean squared counterfactual error over all units and grid treatments."""
    if dataset.dgp is None:
        raise UnsupportedDatasetError(f"dataset {dataset.name!r} has no counterfactual oracle")
    ts = _grid_values(grid)
    es = ey = 0.0
    for t in ts:
        s, y = counterfactual(dataset.dgp, dataset.X, np.full(dataset.n, t))
        s_hat, y_hat = model.predict(dataset.X, t)
        es += float(np.sum((s_hat - s) ** 2))
        ey += float(np.sum((y_hat - y) ** 2))
    count = dataset.n * len(ts)
    return es / count, ey / count


# -- frontiers -------------------------------------------------------------------

@dataclass
class FrontierSet:
    points: np.ndarray                  # (n, 3) rows of (t, s, y)
    dominated: np.ndarray               # (n,) bool
    maximize: bool = True

    @property
    def on_frontier(self) -> np.ndarray:
        return ~self.dominated

    @property
    def frontier(self) -> np.ndarray:
        return self.points[~self.dominated]


def dominated_flags(s: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Flag points dominated under (>=, >=, one strict) when maximizing; O(n log n)."""
    s = np.asarray(s, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    order = np.lexsort((-y, -s))        # s descending, then y descending
    flags = np.zeros(len(s), dtype=bool)
    best_y_above = -np.inf              # max y over strictly larger s
    i = 0
    while i < len(order):
        j = i
        while j < len(order) and s[order[j]] == s[order[i]]:
            j += 1
        group = order[i:j]
        top = y[group[0]]
        for k in group:
            flags[k] = best_y_above >= y[k] or y[k] < top
        best_y_above = max(best_y_above, top)
        i = j
    return flags


def extract_frontier(points, maximize: bool = True) -> FrontierSet:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("extract_frontier needs at least one point")
    sign = 1.0 if maximize else -1.0
    flags = dominated_flags(sign * pts[:, 1], sign * pts[:, 2])
    return FrontierSet(pts, flags, maximize)


def _unit_hit(cloud: np.ndarray, point: np.ndarray, epsilon: float, maximize: bool) -> bool:
    sign = 1.0 if maximize else -1.0
    c, p = sign * cloud, sign * point
    beats = np.all(c >= p, axis=1) & np.any(c > p, axis=1)
    if not np.any(beats):
        return True
    front = c[~dominated_flags(c[:, 0], c[:, 1])]
    return bool(np.any(np.all(np.abs(front - p) <= epsilon, axis=1)))


def unit_clouds(dataset: Dataset, grid, estimator: EstimatorModel | None = None,
                mode: str = "oracle") -> tuple[np.ndarray, np.ndarray]:
    """(s, y) at every grid treatment, shape (units, grid), from the oracle or the estimator."""
    ts = _grid_values(grid)
    if mode == "estimator":
        return predict_grid(estimator, dataset.X, ts)
    if mode != "oracle":
        raise ValueError(f"unknown cloud mode {mode!r}")
    if dataset.dgp is None:
        raise UnsupportedDatasetError(f"dataset {dataset.name!r} has no counterfactual oracle")
    S = np.empty((dataset.n, len(ts)))
    Y = np.empty_like(S)
    for j, t in enumerate(ts):
        S[:, j], Y[:, j] = counterfactual(dataset.dgp, dataset.X, np.full(dataset.n, t))
    return S, Y


def policy_points(policy: PolicyModel, dataset: Dataset, estimator: EstimatorModel | None = None,
                  mode: str = "oracle") -> np.ndarray:
    """(t, s, y) rows for the policy's chosen treatment of every unit."""
    t = np.atleast_1d(act(policy, dataset.X))
    if mode == "estimator":
        s, y = estimator.predict(dataset.X, t)
    else:
        if dataset.dgp is None:
            raise UnsupportedDatasetError(f"dataset {dataset.name!r} has no counterfactual oracle")
        s, y = counterfactual(dataset.dgp, dataset.X, t)
    return np.column_stack([t, s, y])


def frontier_hits(points: np.ndarray, S: np.ndarray, Y: np.ndarray, epsilon: float = 0.01,
                  maximize: bool = True) -> np.ndarray:
    """Per-unit: the point is non-dominated by its cloud or within ``epsilon`` of a frontier member."""
    return np.array([_unit_hit(np.column_stack([S[i], Y[i]]), points[i, 1:], epsilon, maximize)
                     for i in range(len(points))])


def policy_frontier_check(policy: PolicyModel, estimator: EstimatorModel | None, dataset: Dataset,
                          grid, epsilon: float = 0.01, mode: str = "oracle",
                          maximize: bool = True) -> float:
    S, Y = unit_clouds(dataset, grid, estimator, mode)
    pts = policy_points(policy, dataset, estimator, mode)
    return float(np.mean(frontier_hits(pts, S, Y, epsilon, maximize)))


def conflicting_units(dataset: Dataset, grid) -> np.ndarray:
    """Units for which some pair of treatments ranks s and y in opposite orders."""
    S, Y = unit_clouds(dataset, grid)
    ds = S[:, :, None] - S[:, None, :]
    dy = Y[:, :, None] - Y[:, None, :]
    return np.flatnonzero(np.any((ds > 0) & (dy < 0), axis=(1, 2)))


# -- matched ground truth ----------------------------------------------------------

def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a, b = a - a.mean(), b - b.mean()
    return float(a @ b / np.sqrt((a @ a) * (b @ b)))


def pearson_match_truth(treated: Dataset, control: Dataset, k: int = 3) -> np.ndarray:
    """Pseudo counterfactual (s, y) per treated unit from its k best-correlated controls.

    Weights are rho / sum(rho) over the top k; if none is positive the plain mean is
    used.  Treated units with constant covariates get NaN rows and a warning.
    """
    if control.n < k:
        raise ValueError(f"need at least {k} control units, got {control.n}")
    outcomes = np.column_stack([control.S, control.Y])
    Xc = control.X - control.X.mean(axis=1, keepdims=True)
    c_norm = np.linalg.norm(Xc, axis=1)
    Xt = treated.X - treated.X.mean(axis=1, keepdims=True)
    t_norm = np.linalg.norm(Xt, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = (Xt @ Xc.T) / np.outer(t_norm, c_norm)
    rho[:, c_norm == 0] = -np.inf
    out = np.full((treated.n, 2), np.nan)
    skipped = []
    for i in range(treated.n):
        if t_norm[i] == 0:
            skipped.append(i)
            continue
        top = np.argsort(-rho[i], kind="stable")[:k]
        w = rho[i, top]
        if np.all(w <= 0) or not np.all(np.isfinite(w)):
            out[i] = outcomes[top].mean(axis=0)
        else:
            w = np.clip(w, 0.0, None)
            out[i] = w @ outcomes[top] / w.sum()
    if skipped:
        warnings.warn(f"skipped treated units with zero-variance covariates: {skipped}")
    return out


# -- plot data and reports -----------------------------------------------------------

PLOT_HEADER = ["unit", "t", "s", "y", "on_frontier", "is_policy"]


def emit_plot_data(frontiers: Sequence[FrontierSet], policy_rows, path) -> int:
    """Write one row per grid point and one per policy point; returns the row count."""
    policy_rows = np.asarray(policy_rows, dtype=np.float64).reshape(-1, 3)
    rows = []
    for unit, fs in enumerate(frontiers):
        for (t, s, y), on in zip(fs.points, fs.on_frontier):
            rows.append([unit, t, s, y, int(on), 0])
        if unit < len(policy_rows):
            t, s, y = policy_rows[unit]
            rows.append([unit, t, s, y, 0, 1])
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PLOT_HEADER)
        w.writerows([[r[0], repr(float(r[1])), repr(float(r[2])), repr(float(r[3])), r[4], r[5]]
                     for r in rows])
    return len(rows)


def read_plot_data(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [{"unit": int(r["unit"]), "t": float(r["t"]), "s": float(r["s"]),
                 "y": float(r["y"]), "on_frontier": r["on_frontier"] == "1",
                 "is_policy": r["is_policy"] == "1"} for r in csv.DictReader(fh)]


def unit_frontiers(S: np.ndarray, Y: np.ndarray, grid, maximize: bool = True) -> list[FrontierSet]:
    ts = _grid_values(grid)
    return [extract_frontier(np.column_stack([ts, S[i], Y[i]]), maximize) for i in range(len(S))]


def mean_std(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std())


@dataclass
class EvalReport:
    seeds: list[int]
    mse_s: list[float]
    mse_y: list[float]
    hit_rate: list[float] = field(default_factory=list)
    grid: dict = field(default_factory=dict)
    runtime: dict = field(default_factory=dict)

    def summary(self) -> dict:
        out = {"n_seeds": len(self.seeds)}
        for name in ("mse_s", "mse_y", "hit_rate"):
            vals = getattr(self, name)
            if vals:
                m, s = mean_std(vals)
                out[name] = {"mean": m, "std": s, "text": f"{m:.3f}±{s:.3f}"}
        return out

    def to_json(self) -> dict:
        return {**asdict(self), "summary": self.summary()}

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))
