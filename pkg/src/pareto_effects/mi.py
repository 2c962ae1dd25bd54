"""Variational log-likelihood and contrastive MI upper bound between Phi(X) and T.

``q(t | rep)`` is Gaussian with mean ``mu_net(rep)`` and log-variance
``var_net(rep)`` (clamped to [-10, 10]).  Up to an additive constant,

    log q(t | rep) = -(mu - t)^2 / exp(logvar) - logvar

The ``"printed"`` form ``(mu - t) / exp(logvar) - logvar`` is kept for comparison.

The MI loss averages ``log q(t_i | rep_i) - log q(t_j | rep_i)`` over all n^2
pairs.  For both forms the inner mean over j only needs the first two moments
of t, so it is evaluated in O(n).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Var
from .models import VARIATIONAL_PARTS, EstimatorModel

LOGVAR_CLAMP = 10.0
FORMS = ("gaussian", "printed")


@dataclass
class MiBatch:
    reps: np.ndarray
    treatments: np.ndarray
    covariates: np.ndarray | None = None

    def __post_init__(self):
        self.reps = np.atleast_2d(np.asarray(self.reps, dtype=np.float64))
        self.treatments = np.asarray(self.treatments, dtype=np.float64).reshape(-1)
        if self.reps.shape[0] < 1 or self.reps.shape[0] != self.treatments.size:
            raise ValueError("MiBatch needs n >= 1 matching rows of reps and treatments")

    @classmethod
    def from_covariates(cls, model: EstimatorModel, x, t) -> "MiBatch":
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        reps = model.represent(model.params.arrays(), x).value
        return cls(reps, t, x)


def q_params(model: EstimatorModel, P, rep) -> tuple[Var, Var]:
    mu = ad.forward(model.mu_net, P, rep)
    logvar = ad.clip(ad.forward(model.var_net, P, rep), -LOGVAR_CLAMP, LOGVAR_CLAMP)
    return mu, logvar


def _check_form(form: str):
    if form not in FORMS:
        raise ValueError(f"unknown log-likelihood form {form!r}")


def log_q_node(mu, logvar, t, form: str = "gaussian") -> Var:
    _check_form(form)
    diff = ad.sub(mu, t)
    num = ad.square(diff) * -1.0 if form == "gaussian" else diff
    return ad.div(num, ad.exp(logvar)) - logvar


def lld_node(model: EstimatorModel, P, rep, t, form: str = "gaussian") -> Var:
    mu, logvar = q_params(model, P, rep)
    return -ad.mean(log_q_node(mu, logvar, np.reshape(t, (-1, 1)), form))


def mi_node(model: EstimatorModel, P, rep, t, form: str = "gaussian") -> Var:
    _check_form(form)
    t = np.reshape(np.asarray(t, dtype=np.float64), (-1, 1))
    mu, logvar = q_params(model, P, rep)
    t_bar, t_sq = float(t.mean()), float((t * t).mean())
    inv_var = ad.exp(-logvar)
    if form == "gaussian":
        # -(mu - t_i)^2 + mean_j (mu - t_j)^2; the logvar terms cancel
        gap = 2.0 * mu * (t - t_bar) + (t_sq - t * t)
    else:
        gap = ad.as_var(t_bar - t)
    return ad.mean(gap * inv_var)


def log_q(rep, t: float, model: EstimatorModel, form: str = "gaussian") -> float:
    P = model.params.arrays()
    mu, logvar = q_params(model, P, np.atleast_2d(np.asarray(rep, dtype=np.float64)))
    return float(log_q_node(mu, logvar, float(t), form).value[0, 0])


def lld_loss(batch: MiBatch, model: EstimatorModel, form: str = "gaussian") -> float:
    return lld_node(model, model.params.arrays(), batch.reps, batch.treatments, form).item()


def mi_loss(batch: MiBatch, model: EstimatorModel, form: str = "gaussian") -> float:
    return mi_node(model, model.params.arrays(), batch.reps, batch.treatments, form).item()


def log_q_matrix(batch: MiBatch, model: EstimatorModel, form: str = "gaussian") -> np.ndarray:
    """L[i, j] = log q(t_j | rep_i), the full pair table."""
    mu, logvar = q_params(model, model.params.arrays(), batch.reps)
    return log_q_node(mu, logvar, batch.treatments[None, :], form).value


def mi_from_log_q(L: np.ndarray) -> float:
    """(1/n^2) sum_ij (L[i, i] - L[i, j]) for a pair table ``L``."""
    L = np.atleast_2d(np.asarray(L, dtype=np.float64))
    return float(np.mean(np.diag(L)[:, None] - L))


def fit_q_grad(model: EstimatorModel, reps, t, form: str = "gaussian") -> tuple[float, np.ndarray]:
    """L_LLD and its gradient with Phi frozen (only variational slices nonzero)."""
    tape = ad.Tape()
    leaves = tape.watch(model.params)
    loss = lld_node(model, leaves, reps, t, form)
    g = tape.backward(loss, model.params)
    g[~model.params.mask(VARIATIONAL_PARTS)] = 0.0
    return loss.item(), g


def alternate_phase_step(batch: MiBatch, model: EstimatorModel, phase: str, step: float,
                         form: str = "gaussian") -> ParamStore:
    """One gradient step of the two-phase MI scheme.

    ``fit_q`` descends L_LLD on the variational heads only.  ``min_mi`` descends
    L_MI on everything except the variational heads, which needs the batch covariates.
    """
    params = model.params
    if phase == "fit_q":
        _, g = fit_q_grad(model, batch.reps, batch.treatments, form)
    elif phase == "min_mi":
        if batch.covariates is None:
            raise ValueError("min_mi phase needs covariates to differentiate through Phi")
        tape = ad.Tape()
        leaves = tape.watch(params)
        rep = model.represent(leaves, batch.covariates)
        g = tape.backward(mi_node(model, leaves, rep, batch.treatments, form), params)
        g[params.mask(VARIATIONAL_PARTS)] = 0.0
    else:
        raise ValueError(f"unknown phase {phase!r}; expected 'fit_q' or 'min_mi'")
    return params.with_values(params.values - step * g)
