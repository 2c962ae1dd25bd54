"""Min-norm combination of task gradients.

Weights come from an augmented-Lagrangian iteration on

    J(w) = 1/2 ||G^T w||^2   s.t.  sum(w) = 1, w >= 0

Each inner step minimizes the augmented Lagrangian over ``w >= 0`` exactly
(``m`` is tiny, so active sets are enumerated) and then updates the multiplier.
Whatever the residual drift of ``sum(w)``, the inner minimizer also minimizes J
on the slice ``sum(w) = c`` with ``c = sum(w)``, and J is homogeneous, so the
final rescale onto the simplex lands on the exact min-norm weights.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

SUM_TOL = 1e-6


class NonFiniteGradientError(ValueError):
    def __init__(self, label: str):
        self.label = label
        super().__init__(f"non-finite entries in gradient of task {label!r}")


@dataclass
class GradientMatrix:
    rows: np.ndarray
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        self.rows = np.atleast_2d(np.asarray(self.rows, dtype=np.float64))
        if not self.labels:
            self.labels = tuple(f"task{i}" for i in range(self.rows.shape[0]))
        if len(self.labels) != self.rows.shape[0]:
            raise ValueError("one label per gradient row")
        for label, row in zip(self.labels, self.rows):
            if not np.all(np.isfinite(row)):
                raise NonFiniteGradientError(label)

    @property
    def m(self) -> int:
        return self.rows.shape[0]

    def gram(self) -> np.ndarray:
        return self.rows @ self.rows.T


@dataclass
class ParetoWeights:
    w: np.ndarray
    mu: float = 0.0
    rho: float = 1.0
    converged: bool = True
    trace: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.rho <= 0:
            raise ValueError("rho must be positive")

    @classmethod
    def initial(cls, w, rho: float = 1.0) -> "ParetoWeights":
        return cls(np.asarray(w, dtype=np.float64), 0.0, rho)


def normalize_gradients(G: GradientMatrix) -> GradientMatrix:
    """Rescale every nonzero row to unit Euclidean norm."""
    norms = np.linalg.norm(G.rows, axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return GradientMatrix(G.rows / safe, G.labels)


def _box_qp(H: np.ndarray, b: np.ndarray) -> np.ndarray:
    """argmin_{w >= 0} 1/2 w^T H w - b^T w for a small PSD H."""
    m = len(b)
    best, best_val = np.zeros(m), 0.0
    for k in range(1, m + 1):
        for support in itertools.combinations(range(m), k):
            idx = list(support)
            sub = H[np.ix_(idx, idx)]
            try:
                ws = np.linalg.solve(sub, b[idx])
            except np.linalg.LinAlgError:
                ws = np.linalg.lstsq(sub, b[idx], rcond=None)[0]
            if np.any(ws < 0):
                continue
            w = np.zeros(m)
            w[idx] = ws
            val = 0.5 * w @ H @ w - b @ w
            if val < best_val - 1e-15:
                best, best_val = w, val
    return best


def objective(A: np.ndarray, w: np.ndarray) -> float:
    return 0.5 * float(w @ A @ w)


def augmented_objective(A: np.ndarray, w: np.ndarray, mu: float, rho: float) -> float:
    r = float(w.sum()) - 1.0
    return objective(A, w) + mu * r + 0.5 * rho * r * r


def min_norm_weights(G: GradientMatrix, state: ParetoWeights, inner_iters: int = 50,
                     variant: str = "exact") -> ParetoWeights:
    """Augmented-Lagrangian min-norm weights, projected onto the simplex.

    ``variant="printed"`` uses ``(GG^T + rho I)`` in the closed-form step, which
    adds a ridge term and only matches the min-norm point for symmetric problems.
    """
    if state.rho <= 0:
        raise ValueError("rho must be positive")
    A = G.gram()
    m = G.m
    rho, mu = state.rho, state.mu
    ones = np.ones(m)
    if variant == "exact":
        H = A + rho * np.outer(ones, ones)
    elif variant == "printed":
        H = A + rho * np.eye(m)
    else:
        raise ValueError(f"unknown variant {variant!r}")

    w = np.clip(state.w, 0.0, None) if state.w.shape == (m,) else np.full(m, 1.0 / m)
    best_w, best_gap = None, np.inf
    trace = []
    for _ in range(inner_iters):
        if variant == "exact":
            w = _box_qp(H, (rho - mu) * ones)
        else:
            w = np.maximum(0.0, np.linalg.solve(H, (rho - mu) * ones))
        gap = abs(w.sum() - 1.0)
        if w.sum() > 0:
            trace.append(objective(A, w / w.sum()))
            if gap < best_gap:
                best_w, best_gap = w.copy(), gap
        mu = mu + rho * (w.sum() - 1.0)
        if gap <= SUM_TOL:
            break
    converged = best_gap <= SUM_TOL
    if best_w is None:
        final = np.full(m, 1.0 / m)
    else:
        final = best_w / best_w.sum()
    return ParetoWeights(final, mu, rho, converged, trace)


def combine_direction(G: GradientMatrix, w: ParetoWeights | np.ndarray) -> np.ndarray:
    weights = w.w if isinstance(w, ParetoWeights) else np.asarray(w, dtype=np.float64)
    if weights.shape != (G.m,):
        raise ValueError(f"{weights.size} weights for {G.m} gradient rows")
    return weights @ G.rows


def descent_certificate(G: GradientMatrix, d: np.ndarray) -> np.ndarray:
    """Inner products <d, g_i>; all >= ||d||^2 at an exact min-norm point."""
    d = np.asarray(d, dtype=np.float64)
    if d.shape != (G.rows.shape[1],):
        raise ValueError("direction length does not match gradient rows")
    return G.rows @ d


def certificate_holds(G: GradientMatrix, d: np.ndarray, tol: float = 1e-6) -> bool:
    dd = float(d @ d)
    if np.sqrt(dd) <= tol:
        return True
    return bool(np.min(descent_certificate(G, d)) >= dd - tol)


def pareto_step(G: GradientMatrix, state: ParetoWeights, inner_iters: int = 50,
                variant: str = "exact") -> tuple[np.ndarray, ParetoWeights, GradientMatrix]:
    """Normalize, solve for weights, and return (direction, new state, normalized G)."""
    Gn = normalize_gradients(G)
    active = np.linalg.norm(Gn.rows, axis=1) > 0
    if not np.any(active):
        return np.zeros(G.rows.shape[1]), state, Gn
    if np.all(active):
        new = min_norm_weights(Gn, state, inner_iters, variant)
    else:
        # zero rows carry no direction; solve on the rest and give them weight 0
        sub = GradientMatrix(Gn.rows[active], tuple(l for l, a in zip(Gn.labels, active) if a))
        prev = state.w[active] if state.w.shape == (G.m,) else np.zeros(0)
        part = min_norm_weights(sub, ParetoWeights(prev, state.mu, state.rho), inner_iters, variant)
        w = np.zeros(G.m)
        w[active] = part.w
        new = ParetoWeights(w, part.mu, part.rho, part.converged, part.trace)
    return combine_direction(Gn, new), new, Gn
