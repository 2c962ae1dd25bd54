"""Pareto-optimal estimation: warm-up on a fixed scalarization, then min-norm epochs."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NumericalOverflowError, ParamStore
from .datagen import Dataset
from .mi import fit_q_grad, mi_node
from .models import VARIATIONAL_PARTS, EstimatorModel, build_estimator
from .pareto import GradientMatrix, ParetoWeights, certificate_holds, pareto_step

TASKS = ("mi", "s", "y")


class TrainingAborted(RuntimeError):
    """Loss or gradient went non-finite; ``snapshot`` holds the last finite parameters."""

    def __init__(self, message: str, snapshot: ParamStore, log: list | None = None):
        super().__init__(message)
        self.snapshot = snapshot
        self.log = log or []


@dataclass
class PoeConfig:
    eta: float = 0.02
    eta_schedule: str = "cosine"
    K: int = 40
    warmup_epochs: int = 20
    warmup_eta: float = 0.01
    q_eta: float = 0.05
    batch_size: int = 512
    alpha: float = 0.5
    beta: float = 0.5
    gamma: float = 0.001
    # "outcome": (mi, s, y) weights = (gamma, alpha, beta); "printed": (alpha, beta, gamma)
    weight_assignment: str = "outcome"
    rho: float = 1.0
    inner_iters: int = 50
    solver_variant: str = "exact"
    patience: int = 20
    clip_norm: float = 5.0
    tasks: tuple[str, ...] = TASKS
    shat_feed: bool = True
    mi_form: str = "gaussian"
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("alpha, beta, gamma must be nonnegative")
        if self.weight_assignment not in ("outcome", "printed"):
            raise ValueError(f"unknown weight assignment {self.weight_assignment!r}")
        self.tasks = tuple(self.tasks)
        if not set(self.tasks) <= set(TASKS) or "mi" not in self.tasks and not self.tasks:
            raise ValueError(f"tasks must be drawn from {TASKS}")

    def task_weights(self) -> dict[str, float]:
        if self.weight_assignment == "outcome":
            w = {"mi": self.gamma, "s": self.alpha, "y": self.beta}
        else:
            w = {"mi": self.alpha, "s": self.beta, "y": self.gamma}
        return {k: v for k, v in w.items() if k in self.tasks}


@dataclass
class LossReport:
    epoch: int
    phase: str
    l_mi: float
    l_s: float
    l_y: float
    w: list[float]
    d_norm: float
    val_loss: float = float("nan")
    cert_ok: bool = True
    wall_time: float = 0.0


def outcome_nodes(model: EstimatorModel, P, x, t, s, y, rep=None):
    s_hat, y_hat = model.outcomes(P, x, t, rep)
    l_s = ad.mean(ad.square(s_hat - np.reshape(s, (-1, 1))))
    l_y = ad.mean(ad.square(y_hat - np.reshape(y, (-1, 1))))
    return l_s, l_y


def outcome_losses(model: EstimatorModel, batch: Dataset) -> tuple[float, float]:
    l_s, l_y = outcome_nodes(model, model.params.arrays(), batch.X, batch.T, batch.S, batch.Y)
    return l_s.item(), l_y.item()


def task_loss_nodes(model: EstimatorModel, P, x, t, s, y, mi_form: str = "gaussian") -> dict:
    rep = model.represent(P, x)
    l_s, l_y = outcome_nodes(model, P, x, t, s, y, rep)
    return {"mi": mi_node(model, P, rep, t, mi_form), "s": l_s, "y": l_y}


def task_gradients(model: EstimatorModel, x, t, s, y, tasks=TASKS,
                   mi_form: str = "gaussian") -> tuple[dict[str, float], GradientMatrix]:
    """Per-task losses and gradient rows; the variational heads are masked out of every row."""
    tape = ad.Tape()
    leaves = tape.watch(model.params)
    nodes = task_loss_nodes(model, leaves, x, t, s, y, mi_form)
    frozen = model.params.mask(VARIATIONAL_PARTS)
    rows = []
    for task in tasks:
        g = tape.backward(nodes[task], model.params)
        g[frozen] = 0.0
        rows.append(g)
    losses = {k: v.item() for k, v in nodes.items()}
    return losses, GradientMatrix(np.array(rows), tuple(tasks))


def validation_loss(model: EstimatorModel, data: Dataset, tasks=TASKS) -> float:
    """Unweighted sum of the outcome MSEs that are being trained."""
    l_s, l_y = outcome_losses(model, data)
    return (l_s if "s" in tasks else 0.0) + (l_y if "y" in tasks else 0.0)


def clipped(g: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(g))
    if max_norm and norm > max_norm:
        return g * (max_norm / norm)
    return g


def _batches(n: int, size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    if size <= 0 or size >= n:
        return [perm]
    return [perm[i:i + size] for i in range(0, n, size)]


def _fit_q_pass(model: EstimatorModel, data: Dataset, order, config: PoeConfig) -> EstimatorModel:
    values = model.params.values.copy()
    P = model.params.arrays()
    for idx in order:
        reps = model.represent(P, data.X[idx]).value
        _, g = fit_q_grad(model, reps, data.T[idx], config.mi_form)
        values -= config.q_eta * clipped(g, config.clip_norm)
        model = model.with_params(model.params.with_values(values))
        P = model.params.arrays()
    return model


def _guard(model: EstimatorModel, last_good: ParamStore, log, fn, *args):
    try:
        out = fn(*args)
    except (NumericalOverflowError, FloatingPointError) as exc:
        raise TrainingAborted(str(exc), last_good, log) from exc
    return out


def _epoch_losses(acc: dict[str, list[float]]) -> tuple[float, float, float]:
    return tuple(float(np.mean(acc[k])) if acc[k] else float("nan") for k in TASKS)


def warmup_epoch(model: EstimatorModel, data: Dataset, config: PoeConfig,
                 rng: np.random.Generator) -> tuple[EstimatorModel, dict]:
    order = _batches(data.n, config.batch_size, rng)
    model = _fit_q_pass(model, data, order, config)
    weights = config.task_weights()
    tasks = tuple(weights)
    wvec = np.array([weights[k] for k in tasks])
    acc = {k: [] for k in TASKS}
    values = model.params.values.copy()
    for idx in order:
        losses, G = task_gradients(model, data.X[idx], data.T[idx], data.S[idx], data.Y[idx],
                                   tasks, config.mi_form)
        values -= config.warmup_eta * clipped(wvec @ G.rows, config.clip_norm)
        model = model.with_params(model.params.with_values(values))
        for k in TASKS:
            acc[k].append(losses[k])
    return model, {"losses": _epoch_losses(acc), "w": wvec.tolist(), "d_norm": float("nan"),
                   "cert_ok": True}


def warmup(model: EstimatorModel, data: Dataset, config: PoeConfig,
           rng: np.random.Generator | None = None) -> EstimatorModel:
    rng = np.random.default_rng(config.seed) if rng is None else rng
    for _ in range(config.warmup_epochs):
        last = model.params.copy()
        model, info = _guard(model, last, [], warmup_epoch, model, data, config, rng)
        if not np.all(np.isfinite(info["losses"][1:])):
            raise TrainingAborted("non-finite warm-up loss", last)
    return model


def poe_epoch(model: EstimatorModel, data: Dataset, config: PoeConfig, state: ParetoWeights,
              rng: np.random.Generator | None = None,
              eta: float | None = None) -> tuple[EstimatorModel, LossReport, ParetoWeights]:
    """One pass of min-norm updates over minibatches of ``data``."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    eta = config.eta if eta is None else eta
    order = _batches(data.n, config.batch_size, rng)
    model = _fit_q_pass(model, data, order, config)
    tasks = tuple(k for k in TASKS if k in config.tasks)
    acc = {k: [] for k in TASKS}
    d_norms, cert_ok = [], True
    values = model.params.values.copy()
    for idx in order:
        losses, G = task_gradients(model, data.X[idx], data.T[idx], data.S[idx], data.Y[idx],
                                   tasks, config.mi_form)
        d, state, Gn = pareto_step(G, state, config.inner_iters, config.solver_variant)
        cert_ok &= certificate_holds(Gn, d)
        values -= eta * d
        model = model.with_params(model.params.with_values(values))
        d_norms.append(float(np.linalg.norm(d)))
        for k in TASKS:
            acc[k].append(losses[k])
    l_mi, l_s, l_y = _epoch_losses(acc)
    report = LossReport(-1, "pareto", l_mi, l_s, l_y, state.w.tolist(), float(np.mean(d_norms)),
                        cert_ok=bool(cert_ok))
    return model, report, state


def initial_state(config: PoeConfig) -> ParetoWeights:
    weights = config.task_weights()
    return ParetoWeights.initial([weights[k] for k in TASKS if k in config.tasks], config.rho)


def pareto_eta(config: PoeConfig, k: int) -> float:
    """Step size for Pareto epoch ``k``: cosine decay from ``eta`` towards zero."""
    if config.eta_schedule == "constant" or config.K <= 1:
        return config.eta
    return config.eta * 0.5 * (1.0 + np.cos(np.pi * k / config.K))


def train_poe(data: Dataset, config: PoeConfig, val: Dataset | None = None,
              model: EstimatorModel | None = None) -> tuple[EstimatorModel, list[LossReport]]:
    """Warm-up, then ``config.K`` Pareto epochs.

    With ``val``, each phase stops early after ``patience`` epochs without
    improvement, and the model with the lowest validation loss of the last phase
    that ran is returned.
    """
    if model is None:
        model = build_estimator(data.m_x, config.seed, shat_feed=config.shat_feed,
                                activation=config.activation)
    if model.m_x != data.m_x:
        raise ValueError(f"estimator expects {model.m_x} covariates, data has {data.m_x}")
    rng = np.random.default_rng(config.seed + 1)
    log: list[LossReport] = []
    state = initial_state(config)
    start = time.perf_counter()
    epoch = 0
    for phase, n_epochs in (("warmup", config.warmup_epochs), ("pareto", config.K)):
        if n_epochs <= 0:
            continue
        best_val, best_params, stale = np.inf, None, 0
        for k in range(n_epochs):
            last = model.params.copy()
            if phase == "warmup":
                model, info = _guard(model, last, log, warmup_epoch, model, data, config, rng)
                report = LossReport(epoch, phase, *info["losses"], info["w"], info["d_norm"])
            else:
                model, report, state = _guard(model, last, log, poe_epoch, model, data, config,
                                              state, rng, pareto_eta(config, k))
                report.epoch = epoch
            losses = [v for t, v in zip(TASKS, (report.l_mi, report.l_s, report.l_y))
                      if t in config.tasks]
            if not np.all(np.isfinite(losses)):
                raise TrainingAborted(f"non-finite loss at epoch {epoch}", last, log)
            report.wall_time = time.perf_counter() - start
            epoch += 1
            if val is not None:
                report.val_loss = _guard(model, last, log, validation_loss, model, val, config.tasks)
                if report.val_loss < best_val:
                    best_val, best_params, stale = report.val_loss, model.params.copy(), 0
                else:
                    stale += 1
            log.append(report)
            if val is not None and config.patience and stale >= config.patience:
                break
        if best_params is not None:
            model = model.with_params(best_params)
    return model, log


def write_log(log: list, path) -> None:
    with Path(path).open("w") as fh:
        for rec in log:
            fh.write(json.dumps(asdict(rec)) + "\n")
