"""Pareto-optimal policy learning against a frozen estimator, and the end-to-end workflow."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NumericalOverflowError
from .datagen import Dataset
from .models import EstimatorModel, PolicyModel, build_policy, save_model
from .pareto import GradientMatrix, ParetoWeights, certificate_holds, pareto_step
from .poe import PoeConfig, TrainingAborted, train_poe, write_log

REGRET_TASKS = ("s", "y")


@dataclass
class PoplConfig:
    lam: float = 0.02
    N: int = 40
    warmup_epochs: int = 20
    warmup_lam: float = 0.02
    t_min: float = 1.0
    t_max: float = 3.0
    grid_points: int = 101
    target_mode: str = "grid_max"
    init_weights: tuple[float, float] = (0.5, 0.5)
    batch_size: int = 512
    rho: float = 1.0
    inner_iters: int = 50
    clip_norm: float = 5.0
    hidden: tuple[int, ...] = (32,)
    activation: str = "elu"
    seed: int = 0

    def __post_init__(self):
        if not self.t_min < self.t_max:
            raise ValueError(f"t_min must be below t_max, got [{self.t_min}, {self.t_max}]")
        if self.grid_points < 2:
            raise ValueError("grid resolution must be at least 2")
        if self.target_mode not in ("grid_max", "dataset_max"):
            raise ValueError(f"unknown target mode {self.target_mode!r}")
        self.init_weights = tuple(self.init_weights)
        self.hidden = tuple(self.hidden)

    def grid(self) -> np.ndarray:
        return np.linspace(self.t_min, self.t_max, self.grid_points)


@dataclass
class RegretTargets:
    mode: str
    s: np.ndarray
    y: np.ndarray
    grid: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if not (np.all(np.isfinite(self.s)) and np.all(np.isfinite(self.y))):
            raise ValueError("regret targets must be finite")

    def take(self, idx) -> "RegretTargets":
        if self.mode == "dataset_max":
            return self
        return RegretTargets(self.mode, self.s[idx], self.y[idx], self.grid)


def predict_grid(estimator: EstimatorModel, x: np.ndarray, grid) -> tuple[np.ndarray, np.ndarray]:
    """Predicted (s, y) for every unit (rows) at every grid treatment (columns)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    P = estimator.params.arrays()
    rep = estimator.represent(P, x)
    S = np.empty((x.shape[0], len(grid)))
    Y = np.empty_like(S)
    for j, t in enumerate(grid):
        s, y = estimator.outcomes(P, x, np.full(x.shape[0], float(t)), rep)
        S[:, j], Y[:, j] = s.value[:, 0], y.value[:, 0]
    return S, Y


def build_targets(estimator: EstimatorModel, data: Dataset, config: PoplConfig) -> RegretTargets:
    if config.target_mode == "dataset_max":
        return RegretTargets("dataset_max", np.max(data.S), np.max(data.Y))
    grid = config.grid()
    S, Y = predict_grid(estimator, data.X, grid)
    return RegretTargets("grid_max", S.max(axis=1), Y.max(axis=1), grid)


def _check_pair(policy: PolicyModel, estimator: EstimatorModel):
    if policy.pi.widths[0] != estimator.m_x:
        raise ValueError(f"policy takes {policy.pi.widths[0]} covariates, "
                         f"estimator takes {estimator.m_x}")


def regret_nodes(policy: PolicyModel, P, estimator: EstimatorModel, x, targets: RegretTargets):
    """(r_s, r_y) as scalar nodes; gradients reach only the policy parameters in ``P``."""
    t = policy.treatments(P, x)
    s_hat, y_hat = estimator.outcomes(estimator.params.arrays(), x, t)
    r_s = ad.mean(np.reshape(targets.s, (-1, 1)) - s_hat)
    r_y = ad.mean(np.reshape(targets.y, (-1, 1)) - y_hat)
    return r_s, r_y


def regret_losses(policy: PolicyModel, estimator: EstimatorModel, x,
                  targets: RegretTargets) -> tuple[float, float]:
    _check_pair(policy, estimator)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    r_s, r_y = regret_nodes(policy, policy.params.arrays(), estimator, x, targets)
    return r_s.item(), r_y.item()


def regret_gradients(policy: PolicyModel, estimator: EstimatorModel, x,
                     targets: RegretTargets) -> tuple[tuple[float, float], GradientMatrix]:
    tape = ad.Tape()
    leaves = tape.watch(policy.params)
    r_s, r_y = regret_nodes(policy, leaves, estimator, x, targets)
    rows = [tape.backward(r, policy.params) for r in (r_s, r_y)]
    return (r_s.item(), r_y.item()), GradientMatrix(np.array(rows), REGRET_TASKS)


@dataclass
class PolicyReport:
    epoch: int
    phase: str
    r_s: float
    r_y: float
    w: list[float]
    d_norm: float
    cert_ok: bool = True
    wall_time: float = 0.0


def _clipped(g: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(g))
    return g * (max_norm / norm) if max_norm and norm > max_norm else g


def _batches(n: int, size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    if size <= 0 or size >= n:
        return [perm]
    return [perm[i:i + size] for i in range(0, n, size)]


def _policy_epoch(policy, estimator, data, targets, config, phase, state, rng, lam):
    values = policy.params.values.copy()
    rs, ry, norms, cert_ok = [], [], [], True
    for idx in _batches(data.n, config.batch_size, rng):
        (r_s, r_y), G = regret_gradients(policy, estimator, data.X[idx], targets.take(idx))
        if phase == "warmup":
            d = _clipped(G.rows.sum(axis=0), config.clip_norm)
        else:
            d, state, Gn = pareto_step(G, state, config.inner_iters)
            cert_ok &= certificate_holds(Gn, d)
        values -= lam * d
        policy = policy.with_params(policy.params.with_values(values))
        rs.append(r_s)
        ry.append(r_y)
        norms.append(float(np.linalg.norm(d)))
    w = [1.0, 1.0] if phase == "warmup" else state.w.tolist()
    report = PolicyReport(-1, phase, float(np.mean(rs)), float(np.mean(ry)), w,
                          float(np.mean(norms)), bool(cert_ok))
    return policy, report, state


def train_popl(policy: PolicyModel, estimator: EstimatorModel, data: Dataset, config: PoplConfig,
               targets: RegretTargets | None = None) -> tuple[PolicyModel, list[PolicyReport]]:
    """Warm-up on r_s + r_y, then ``config.N`` min-norm epochs; the estimator is never modified."""
    _check_pair(policy, estimator)
    frozen = estimator.params.checksum()
    targets = build_targets(estimator, data, config) if targets is None else targets
    rng = np.random.default_rng(config.seed + 2)
    state = ParetoWeights.initial(config.init_weights, config.rho)
    log: list[PolicyReport] = []
    start = time.perf_counter()
    epoch = 0
    for phase, n_epochs, lam in (("warmup", config.warmup_epochs, config.warmup_lam),
                                 ("pareto", config.N, config.lam)):
        for _ in range(n_epochs):
            last = policy.params.copy()
            try:
                policy, report, state = _policy_epoch(policy, estimator, data, targets, config,
                                                      phase, state, rng, lam)
            except (NumericalOverflowError, FloatingPointError) as exc:
                raise TrainingAborted(str(exc), last, log) from exc
            if not (np.isfinite(report.r_s) and np.isfinite(report.r_y)):
                raise TrainingAborted(f"non-finite regret at epoch {epoch}", last, log)
            report.epoch = epoch
            report.wall_time = time.perf_counter() - start
            log.append(report)
            epoch += 1
    if estimator.params.checksum() != frozen:
        raise RuntimeError("estimator parameters changed during policy learning")
    return policy, log


# -- workflow --------------------------------------------------------------------

def config_hash(poe_config: PoeConfig, popl_config: PoplConfig) -> str:
    doc = json.dumps({"poe": asdict(poe_config), "popl": asdict(popl_config)}, sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()


@dataclass
class WorkflowResult:
    estimator: EstimatorModel
    policy: PolicyModel
    poe_log: list
    popl_log: list
    manifest: dict


def run_workflow(train: Dataset, poe_config: PoeConfig, popl_config: PoplConfig,
                 val: Dataset | None = None, out_dir=None) -> WorkflowResult:
    """Estimator warm-up and Pareto epochs, regret targets, then policy warm-up and Pareto epochs.

    With ``out_dir``, the estimator snapshot and log are written before policy
    learning starts, so they survive a later failure.
    """
    out = Path(out_dir) if out_dir is not None else None
    manifest = {"dataset": train.name, "seed": poe_config.seed,
                "config_hash": config_hash(poe_config, popl_config),
                "poe_config": asdict(poe_config), "popl_config": asdict(popl_config),
                "artifacts": {}}
    estimator, poe_log = train_poe(train, poe_config, val)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_model(estimator, out / "estimator.json")
        write_log(poe_log, out / "poe_log.jsonl")
        manifest["artifacts"].update(estimator="estimator.json", poe_log="poe_log.jsonl")
    policy = build_policy(train.m_x, popl_config.t_min, popl_config.t_max, popl_config.seed,
                          popl_config.hidden, popl_config.activation)
    policy, popl_log = train_popl(policy, estimator, train, popl_config)
    manifest["estimator_checksum"] = estimator.params.checksum()
    manifest["policy_checksum"] = policy.params.checksum()
    if out is not None:
        save_model(policy, out / "policy.json")
        write_log(popl_log, out / "popl_log.jsonl")
        manifest["artifacts"].update(policy="policy.json", popl_log="popl_log.jsonl")
    return WorkflowResult(estimator, policy, poe_log, popl_log, manifest)
