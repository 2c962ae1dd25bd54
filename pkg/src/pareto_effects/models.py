"""The estimator and policy networks and their shared-representation wiring."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DenseNet, ParamStore, Var

# Fixed feature maps for the treatment embedding.  Coordinate 0 must stay the
# identity so the embedding is injective.
TRANSFORMS: dict[str, Callable[[Var], Var]] = {
    "t": lambda t: t,
    "sin": ad.sin,
    "cos": ad.cos,
    "square": ad.square,
    "sqrt_abs": lambda t: ad.sqrt(ad.absolute(t)),
    "log1p_abs": lambda t: ad.log(1.0 + ad.absolute(t)),
    "gauss": lambda t: ad.exp(-ad.square(t)),
    "expm1": lambda t: ad.exp(t) - 1.0,
}

DEFAULT_TRANSFORMS = ("t", "sin", "cos", "square", "sqrt_abs", "log1p_abs", "gauss", "t")

ESTIMATOR_PARTS = ("phi", "head_s", "head_y", "mu_net", "var_net")
VARIATIONAL_PARTS = ("mu_net.", "var_net.")


@dataclass(frozen=True)
class TreatmentEmbedding:
    transforms: tuple[str, ...] = DEFAULT_TRANSFORMS

    def __post_init__(self):
        if not self.transforms or self.transforms[0] != "t":
            raise ValueError("first transform must be the identity 't'")
        unknown = [n for n in self.transforms if n not in TRANSFORMS]
        if unknown:
            raise ValueError(f"unknown transforms {unknown}")

    @property
    def width(self) -> int:
        return len(self.transforms)

    def __call__(self, t) -> Var:
        """Embed an (n,) or (n, 1) treatment column into (n, width)."""
        t = ad.as_var(t)
        if t.value.ndim == 1:
            t = ad._make(t.value[:, None], (t,), lambda g: (g[:, 0],), "expand")
        return ad.concat([TRANSFORMS[name](t) for name in self.transforms], axis=1)


def embed_treatment(t: float, transforms: Sequence[str] = DEFAULT_TRANSFORMS) -> np.ndarray:
    return TreatmentEmbedding(tuple(transforms))(np.array([float(t)])).value[0]


@dataclass
class EstimatorModel:
    phi: DenseNet
    head_s: DenseNet
    head_y: DenseNet
    mu_net: DenseNet
    var_net: DenseNet
    psi: TreatmentEmbedding
    params: ParamStore
    shat_feed: bool = True

    @property
    def m_x(self) -> int:
        return self.phi.widths[0]

    def nets(self) -> list[DenseNet]:
        return [self.phi, self.head_s, self.head_y, self.mu_net, self.var_net]

    def with_params(self, params: ParamStore) -> "EstimatorModel":
        return EstimatorModel(self.phi, self.head_s, self.head_y, self.mu_net, self.var_net,
                              self.psi, params, self.shat_feed)

    def describe(self) -> dict:
        return {"kind": "estimator", "nets": [n.describe() for n in self.nets()],
                "transforms": list(self.psi.transforms), "shat_feed": self.shat_feed}

    # recorded (tape) evaluation; P maps parameter names to Vars or arrays

    def represent(self, P, x) -> Var:
        return ad.forward(self.phi, P, x)

    def outcomes(self, P, x, t, rep: Var | None = None) -> tuple[Var, Var]:
        """(s_hat, y_hat) as (n, 1) blocks; y_hat consumes the predicted s_hat."""
        rep = self.represent(P, x) if rep is None else rep
        shared = ad.concat([rep, self.psi(t)], axis=1)
        s_hat = ad.forward(self.head_s, P, shared)
        y_in = ad.concat([shared, s_hat], axis=1) if self.shat_feed else shared
        y_hat = ad.forward(self.head_y, P, y_in)
        return s_hat, y_hat

    # plain evaluation

    def predict(self, x, t) -> tuple[np.ndarray, np.ndarray]:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        s, y = self.outcomes(self.params.arrays(), x, t)
        return s.value[:, 0], y.value[:, 0]


def _predict_one(model: EstimatorModel, x, t):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.m_x,):
        raise ValueError(f"expected {model.m_x} covariates, got shape {x.shape}")
    return x[None, :], np.array([float(t)])


def predict_s(model: EstimatorModel, x, t) -> float:
    xb, tb = _predict_one(model, x, t)
    P = model.params.arrays()
    shared = ad.concat([model.represent(P, xb), model.psi(tb)], axis=1)
    return float(ad.forward(model.head_s, P, shared).value[0, 0])


def predict_y(model: EstimatorModel, x, t, s_hat: float) -> float:
    xb, tb = _predict_one(model, x, t)
    P = model.params.arrays()
    parts = [model.represent(P, xb), model.psi(tb)]
    if model.shat_feed:
        parts.append(np.array([[float(s_hat)]]))
    return float(ad.forward(model.head_y, P, ad.concat(parts, axis=1)).value[0, 0])


def build_estimator(m_x: int, seed: int | np.random.Generator = 0, *,
                    phi_hidden: Sequence[int] = (64, 32), head_hidden: Sequence[int] = (32,),
                    var_hidden: Sequence[int] = (16,), transforms: Sequence[str] = DEFAULT_TRANSFORMS,
                    activation: str = "tanh", shat_feed: bool = True) -> EstimatorModel:
    rng = np.random.default_rng(seed)
    psi = TreatmentEmbedding(tuple(transforms))
    d_phi = phi_hidden[-1]
    d_shared = d_phi + psi.width
    phi = DenseNet("phi", (m_x, *phi_hidden), activation, out_activation=activation)
    head_s = DenseNet("head_s", (d_shared, *head_hidden, 1), activation)
    head_y = DenseNet("head_y", (d_shared + int(shat_feed), *head_hidden, 1), activation)
    mu_net = DenseNet("mu_net", (d_phi, *var_hidden, 1), activation)
    var_net = DenseNet("var_net", (d_phi, *var_hidden, 1), activation)
    blocks = []
    for net in (phi, head_s, head_y, mu_net, var_net):
        blocks += net.init_blocks(rng)
    return EstimatorModel(phi, head_s, head_y, mu_net, var_net, psi,
                          ParamStore.from_blocks(blocks), shat_feed)


@dataclass
class PolicyModel:
    pi: DenseNet
    t_min: float
    t_max: float
    params: ParamStore

    def __post_init__(self):
        if not self.t_min < self.t_max:
            raise ValueError(f"empty treatment interval [{self.t_min}, {self.t_max}]")

    def with_params(self, params: ParamStore) -> "PolicyModel":
        return PolicyModel(self.pi, self.t_min, self.t_max, params)

    def squash(self, raw) -> Var:
        mid = 0.5 * (self.t_min + self.t_max)
        half = 0.5 * (self.t_max - self.t_min)
        return mid + half * ad.tanh(raw)

    def treatments(self, P, x) -> Var:
        """Policy treatments as an (n, 1) block."""
        return self.squash(ad.forward(self.pi, P, x))

    def describe(self) -> dict:
        return {"kind": "policy", "nets": [self.pi.describe()],
                "t_min": self.t_min, "t_max": self.t_max}


def act(policy: PolicyModel, x) -> np.ndarray | float:
    """Treatment chosen for one covariate vector (float) or a batch (array)."""
    x = np.asarray(x, dtype=np.float64)
    out = policy.treatments(policy.params.arrays(), np.atleast_2d(x)).value[:, 0]
    # tanh saturates to exactly +-1 in float64; keep the interval closed
    out = np.clip(out, policy.t_min, policy.t_max)
    return float(out[0]) if x.ndim == 1 else out


def build_policy(m_x: int, t_min: float, t_max: float, seed: int | np.random.Generator = 0,
                 hidden: Sequence[int] = (32,), activation: str = "elu") -> PolicyModel:
    rng = np.random.default_rng(seed)
    pi = DenseNet("pi", (m_x, *hidden, 1), activation)
    return PolicyModel(pi, float(t_min), float(t_max), ParamStore.from_blocks(pi.init_blocks(rng)))


# -- snapshots -------------------------------------------------------------------

def _net_from(doc: dict) -> DenseNet:
    return DenseNet(doc["name"], tuple(doc["widths"]), doc["activation"], doc["out_activation"])


def save_model(model: EstimatorModel | PolicyModel, path) -> None:
    doc = {"architecture": model.describe(), "params": model.params.to_json()}
    Path(path).write_text(json.dumps(doc))


def load_model(path) -> EstimatorModel | PolicyModel:
    doc = json.loads(Path(path).read_text())
    arch, params = doc["architecture"], ParamStore.from_json(doc["params"])
    nets = {d["name"]: _net_from(d) for d in arch["nets"]}
    if arch["kind"] == "policy":
        return PolicyModel(nets["pi"], arch["t_min"], arch["t_max"], params)
    return EstimatorModel(nets["phi"], nets["head_s"], nets["head_y"], nets["mu_net"],
                          nets["var_net"], TreatmentEmbedding(tuple(arch["transforms"])),
                          params, arch["shat_feed"])
