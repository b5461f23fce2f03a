"""Large-timescale reservation control: GPR surrogate of the window's maximum
latency, central-difference gradients of its posterior mean, and projected
primal-dual updates of the reservation and the latency multiplier.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve


def se_kernel(a, b) -> np.ndarray:
    """``exp(-0.5 * |a - b|^2)`` between the rows of ``a`` and ``b``."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    d2 = (np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * a @ b.T)
    return np.exp(-0.5 * np.maximum(d2, 0.0))


class SingularGram(np.linalg.LinAlgError):
    pass


@dataclass
class GprDataset:
    inputs: np.ndarray  # (B, 3)
    observations: np.ndarray  # (B,)
    noise_var: float = 1e-4
    max_points: int = 512

    @classmethod
    def empty(cls, noise_var: float = 1e-4, max_points: int = 512) -> "GprDataset":
        return cls(np.zeros((0, 3)), np.zeros(0), noise_var, max_points)

    def __len__(self) -> int:
        return len(self.observations)

    def add(self, x, y: float) -> None:
        x = np.asarray(x, dtype=float).reshape(1, -1)
        if np.any(x < 0) or np.any(x > 1):
            raise ValueError("GPR inputs must lie in [0, 1]^3")
        self.inputs = np.vstack([self.inputs, x])[-self.max_points:]
        self.observations = np.append(self.observations, float(y))[-self.max_points:]


class GprModel:
    """Zero-mean GP with a unit-length squared-exponential kernel.

    With ``standardize`` the observations are centred and scaled before
    fitting; predictions are mapped back to the original units.
    """

    def __init__(self, dataset: GprDataset, standardize: bool = True):
        if len(dataset) < 1:
            raise ValueError("GPR needs at least one observation")
        self.X = dataset.inputs.copy()
        y = dataset.observations.astype(float)
        self.standardize = standardize
        if standardize:
            self.y_mean = float(y.mean())
            sd = float(y.std())
            self.y_scale = sd if sd > 0 else 1.0
        else:
            self.y_mean, self.y_scale = 0.0, 1.0
        self.y = (y - self.y_mean) / self.y_scale
        self.noise_var = dataset.noise_var
        self.K = se_kernel(self.X, self.X)
        A = self.K + self.noise_var * np.eye(len(self.y))
        try:
            self._chol = cho_factor(A, lower=True)
        except np.linalg.LinAlgError as exc:
            raise SingularGram("K + noise*I is not positive definite "
                               "(duplicate inputs with zero noise?)") from exc
        self.alpha = cho_solve(self._chol, self.y)

    def mean(self, q) -> np.ndarray:
        k = se_kernel(q, self.X)
        return self.y_mean + self.y_scale * (k @ self.alpha)

    def predict(self, q):
        """Posterior mean and variance (original units) at the rows of ``q``."""
        q = np.atleast_2d(np.asarray(q, dtype=float))
        k = se_kernel(q, self.X)
        mu = self.y_mean + self.y_scale * (k @ self.alpha)
        v = cho_solve(self._chol, k.T)
        var = 1.0 - np.sum(k * v.T, axis=1)
        return mu, np.maximum(var, 0.0) * self.y_scale ** 2


def posterior(model: GprModel, query) -> tuple[float, float]:
    mu, var = model.predict(np.asarray(query, dtype=float).reshape(1, -1))
    return float(mu[0]), float(var[0])


def expected_gradient(model: GprModel, x, tau: float = 0.05) -> np.ndarray:
    """Central difference ``0.5 * (mu(x + tau e_m) - mu(x - tau e_m)) / tau`` per axis.

    Probes are clipped into [0, 1]; the divisor stays ``tau`` as written.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    x = np.asarray(x, dtype=float)
    eye = np.eye(x.size)
    up = np.clip(x + tau * eye, 0.0, 1.0)
    down = np.clip(x - tau * eye, 0.0, 1.0)
    mu = model.mean(np.vstack([up, down]))
    return 0.5 * (mu[: x.size] - mu[x.size:]) / tau


@dataclass(frozen=True)
class ReservationState:
    x: tuple  # (uplink, downlink, compute) fractions
    lam: float = 0.0
    eta1: float = 0.02
    eta2: float = 0.02
    tau: float = 0.05
    latency_max: float = 500.0
    weights: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("multiplier must be non-negative")


def update_reservation(state: ReservationState, gradient, l_h: float,
                       rule: str = "descent") -> ReservationState:
    """One projected primal-dual step; ``gradient`` and ``l_h`` share units.

    ``rule="printed"`` moves ``x <- clip(x + eta1 * (1 - lam * grad))``.  With
    a latency gradient that is negative in every resource, that direction never
    reduces usage.  ``rule="descent"`` steps down the Lagrangian
    ``sum(w * x) + lam * (l_H - L_max)`` instead:
    ``x <- clip(x - eta1 * (w + lam * grad))``.  The multiplier update is
    ``lam <- max(0, lam + eta2 * (l_H - L_max))`` in both cases.
    """
    g = [float(v) for v in np.ravel(gradient)]
    if len(g) != 3 or not all(math.isfinite(v) for v in g):
        raise ValueError(f"gradient must be a finite 3-vector, got {gradient!r}")
    if not math.isfinite(l_h):
        raise ValueError("observed latency must be finite")
    # plain floats: this runs once per window and in large property sweeps
    if rule == "printed":
        x_new = [x + state.eta1 * (1.0 - state.lam * gm) for x, gm in zip(state.x, g)]
    elif rule == "descent":
        x_new = [x - state.eta1 * (w + state.lam * gm)
                 for x, w, gm in zip(state.x, state.weights, g)]
    else:
        raise ValueError(f"unknown update rule {rule!r}")
    x_new = tuple(min(1.0, max(0.0, v)) for v in x_new)
    lam = max(0.0, state.lam + state.eta2 * (l_h - state.latency_max))
    return replace(state, x=x_new, lam=float(lam))


class EmptyWindow(ValueError):
    pass


def observe_window(latencies) -> float:
    """Maximum completed-offload latency of a reservation window."""
    lat = list(latencies)
    if not lat:
        raise EmptyWindow("no completed offloads in the reservation window")
    return float(max(lat))


def weighted_usage(x, weights=(1.0, 1.0, 1.0)) -> float:
    """Weighted mean reserved fraction."""
    w = np.asarray(weights, dtype=float)
    return float(np.dot(w, np.asarray(x, dtype=float)) / w.sum())
