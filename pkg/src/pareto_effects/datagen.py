"""Noiseless data-generating processes, CSV I/O and train/val/test splitting."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np


class MissingSourceError(ValueError):
    pass


def _softplus(x):
    return np.logaddexp(0.0, x)


# Each DGP: t(X) -> (n,), s(X, t) -> (n,), y(X, t, s) -> (n,).  X is (n, m).

def _sim_t(X):
    return _softplus(X).sum(axis=1)


def _sim_s(X, t):
    return 0.4 * np.sin(t) + 0.2 * np.exp(-X ** 2).sum(axis=1) + 1.0


def _sim_y(X, t, s):
    return 0.1 * np.exp(np.sqrt(t)) - 0.1 * np.cos(s) + 0.01 * (X ** 2).sum(axis=1) + 1.0


def _ihdp_t(X):
    return np.cos(1.0 + X ** 2).sum(axis=1)


def _ihdp_s(X, t):
    return 2.5 * np.sin(2.0 + t) + 0.25 * np.exp(-X ** 2).sum(axis=1) + 1.25


def _ihdp_y(X, t, s):
    # log|S| keeps the map total; S > 0 on realistic covariates
    return 0.1 * t ** 2 - np.log(np.abs(s)) + 2.0 * X.sum(axis=1) + 5.0


def _jobs_t(X):
    return 0.2 * (np.sin(X) + np.exp(-X ** 2)).sum(axis=1)


def _jobs_s(X, t):
    return 1.7 * np.sin(2.0 * t) + 0.05 * X.sum(axis=1) + 3.4


def _jobs_y(X, t, s):
    return 0.7 * t - s + 0.02 * np.log1p(X ** 2).sum(axis=1) + 5.0


def _twins_t(X):
    return 0.5 * _softplus(X).sum(axis=1) - 15.0


def _twins_s(X, t):
    return 0.75 * np.sin(t) + 0.02 * np.exp(-X ** 2).sum(axis=1) + 2.0


def _twins_y(X, t, s):
    # sqrt|T|: the treatment map can go negative on standardized covariates
    return 0.2 * np.exp(np.sqrt(np.abs(t))) - 0.2 * np.cos(s) + 0.001 * (X ** 2).sum(axis=1) + 2.0


@dataclass(frozen=True)
class DgpSpec:
    name: str
    m_x: int
    t_map: Callable
    s_map: Callable
    y_map: Callable
    interval: tuple[float, float]
    sampled: bool = False

    def t(self, X) -> np.ndarray:
        return self.t_map(np.atleast_2d(X))

    def s(self, X, t) -> np.ndarray:
        X = np.atleast_2d(X)
        return self.s_map(X, np.broadcast_to(np.asarray(t, dtype=np.float64), (X.shape[0],)))

    def y(self, X, t, s) -> np.ndarray:
        X = np.atleast_2d(X)
        n = (X.shape[0],)
        return self.y_map(X, np.broadcast_to(np.asarray(t, dtype=np.float64), n),
                          np.broadcast_to(np.asarray(s, dtype=np.float64), n))


DGPS: dict[str, DgpSpec] = {
    "simulation": DgpSpec("simulation", 2, _sim_t, _sim_s, _sim_y, (1.0, 3.0), sampled=True),
    "ihdp": DgpSpec("ihdp", 25, _ihdp_t, _ihdp_s, _ihdp_y, (4.0, 6.0)),
    "jobs": DgpSpec("jobs", 17, _jobs_t, _jobs_s, _jobs_y, (5.0, 12.0)),
    "twins": DgpSpec("twins", 38, _twins_t, _twins_s, _twins_y, (1.0, 2.0)),
}


def get_dgp(name: str) -> DgpSpec:
    try:
        return DGPS[name]
    except KeyError:
        raise ValueError(f"unknown dataset {name!r}; expected one of {sorted(DGPS)}") from None


@dataclass
class Dataset:
    X: np.ndarray
    T: np.ndarray
    S: np.ndarray
    Y: np.ndarray
    dgp: DgpSpec | None = None
    name: str = "custom"
    seed: int | None = None
    masks: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        n = self.X.shape[0]
        for attr in ("T", "S", "Y"):
            v = np.asarray(getattr(self, attr), dtype=np.float64).reshape(-1)
            if v.size != n:
                raise ValueError(f"{attr} has {v.size} entries, X has {n} rows")
            setattr(self, attr, v)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def m_x(self) -> int:
        return self.X.shape[1]

    def subset(self, part: str) -> "Dataset":
        idx = self.masks[part]
        return Dataset(self.X[idx], self.T[idx], self.S[idx], self.Y[idx], self.dgp, self.name, self.seed)

    def counterfactual(self, x, t_cf) -> tuple[np.ndarray, np.ndarray]:
        if self.dgp is None:
            raise UnsupportedDatasetError(f"dataset {self.name!r} has no counterfactual oracle")
        return counterfactual(self.dgp, x, t_cf)


class UnsupportedDatasetError(ValueError):
    pass


def generate(spec: DgpSpec | str, n: int | None = None, seed: int = 0,
             covariates: np.ndarray | None = None) -> Dataset:
    """Sample covariates (Simulation: U(0, 2)^2) or take ingested ones, then apply the maps."""
    spec = get_dgp(spec) if isinstance(spec, str) else spec
    if spec.sampled:
        if n is None or n < 1:
            raise ValueError("generate() needs n >= 1")
        X = np.random.default_rng(seed).uniform(0.0, 2.0, size=(n, spec.m_x))
    else:
        if covariates is None:
            raise MissingSourceError(f"{spec.name} needs ingested covariates")
        X = np.atleast_2d(np.asarray(covariates, dtype=np.float64))
        if X.shape[1] != spec.m_x:
            raise ValueError(f"{spec.name} expects {spec.m_x} covariates, got {X.shape[1]}")
        if n is not None:
            X = X[:n]
    T = spec.t(X)
    S = spec.s(X, T)
    Y = spec.y(X, T, S)
    return Dataset(X, T, S, Y, spec, spec.name, seed)


def counterfactual(spec: DgpSpec, x, t_cf) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth (s, y) at treatment ``t_cf``; scalars in, scalars out."""
    scalar = np.ndim(x) == 1
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    s = spec.s(X, t_cf)
    y = spec.y(X, t_cf, s)
    if scalar and np.ndim(t_cf) == 0:
        return float(s[0]), float(y[0])
    return s, y


# -- splitting -------------------------------------------------------------------

def split_sizes(n: int, fractions=(0.64, 0.16, 0.20)) -> tuple[int, int, int]:
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {fractions}")
    n_val = int(math.floor(n * fractions[1] + 0.5))
    n_test = int(math.floor(n * fractions[2] + 0.5))
    n_train = n - n_val - n_test
    sizes = (n_train, n_val, n_test)
    for part, k, f in zip(("train", "val", "test"), sizes, fractions):
        if k <= 0 and f > 0:
            raise ValueError(f"empty {part} split for n={n}")
    return sizes


def split(dataset: Dataset, fractions=(0.64, 0.16, 0.20), seed: int = 0) -> Dataset:
    n_train, n_val, _ = split_sizes(dataset.n, fractions)
    perm = np.random.default_rng(seed).permutation(dataset.n)
    masks = {}
    for part, idx in zip(("train", "val", "test"),
                         np.split(perm, [n_train, n_train + n_val])):
        m = np.zeros(dataset.n, dtype=bool)
        m[idx] = True
        masks[part] = m
    dataset.masks = masks
    return dataset


# -- CSV I/O ---------------------------------------------------------------------

def ingest_covariates(path, n_columns: int) -> np.ndarray:
    """Read a covariate CSV with a header row and standardize columns.

    Rows with missing or unparsable values are dropped with a warning naming
    them; zero-variance columns are left untouched.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        if len(header) != n_columns:
            raise ValueError(f"{path}: expected {n_columns} columns, found {len(header)}")
        rows, rejected = [], []
        for i, row in enumerate(reader):
            if len(row) != n_columns:
                raise ValueError(f"{path}: row {i} has {len(row)} columns, expected {n_columns}")
            try:
                vals = [float(v) for v in row]
            except ValueError:
                rejected.append(i)
                continue
            if any(math.isnan(v) for v in vals):
                rejected.append(i)
                continue
            rows.append(vals)
    if rejected:
        warnings.warn(f"{path}: dropped rows with missing values: {rejected}")
    X = np.array(rows, dtype=np.float64).reshape(-1, n_columns)
    mean, std = X.mean(axis=0), X.std(axis=0)
    varying = std > 0
    X[:, varying] = (X[:, varying] - mean[varying]) / std[varying]
    return X


def write_csv(dataset: Dataset, path) -> str:
    """Write ``x_1..x_m,t,s,y`` rows; returns the sha256 of the file."""
    path = Path(path)
    header = [f"x_{i + 1}" for i in range(dataset.m_x)] + ["t", "s", "y"]
    table = np.column_stack([dataset.X, dataset.T, dataset.S, dataset.Y])
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows([[repr(float(v)) for v in row] for row in table])
    return file_checksum(path)


def read_csv(path, name: str = "custom") -> Dataset:
    path = Path(path)
    with path.open(newline="") as fh:
        header = next(csv.reader(fh))
    if header[-3:] != ["t", "s", "y"]:
        raise ValueError(f"{path}: expected trailing columns t,s,y")
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    dgp = DGPS.get(name)
    return Dataset(table[:, :-3], table[:, -3], table[:, -2], table[:, -1], dgp, name)


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def dataset_manifest(dataset: Dataset, fractions, checksum: str | None = None) -> dict:
    return {"name": dataset.name, "n": dataset.n, "m_x": dataset.m_x, "seed": dataset.seed,
            "split_fractions": list(fractions), "checksum": checksum}


def write_manifest(doc: dict, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))
