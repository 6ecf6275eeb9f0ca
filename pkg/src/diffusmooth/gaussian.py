"""Gaussian and Gaussian-mixture states in moment and natural coordinates.

The scalar Gaussian is parameterized either by its moments ``(m, S)`` or by
the natural coordinates ``(eta, theta) = (m/S, -1/(2S))``.  Mixtures carry a
weight vector on the standard simplex plus one Gaussian per component.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import NearSingularMeanError, UnsupportedOrderError

# Smallest admissible variance; keeps 1/theta representable.
VARIANCE_FLOOR = 1e-10

# Means closer to zero than this reject the first inverse-moment rule.
MEAN_SINGULARITY_TOL = 1e-8

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GaussianParams:
    """Scalar Gaussian with mean ``m`` and variance ``S > 0``."""

    m: float
    S: float

    def __post_init__(self):
        if not (math.isfinite(self.m) and math.isfinite(self.S)):
            raise ValueError("Gaussian parameters must be finite")
        if self.S < VARIANCE_FLOOR:
            raise ValueError(f"variance {self.S} below floor {VARIANCE_FLOOR}")

    @property
    def eta(self) -> float:
        return self.m / self.S

    @property
    def theta(self) -> float:
        return -0.5 / self.S

    @classmethod
    def from_natural(cls, eta: float, theta: float) -> "GaussianParams":
        if theta >= 0:
            raise ValueError("second natural parameter must be negative")
        S = -0.5 / theta
        return cls(eta * S, S)

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        return -0.5 * ((x - self.m) ** 2 / self.S + np.log(self.S) + _LOG_2PI)

    def pdf(self, x):
        return np.exp(self.logpdf(x))


@dataclass(frozen=True)
class GaussianMixtureState:
    """Convex combination of ``k`` scalar Gaussians."""

    weights: tuple[float, ...]
    components: tuple[GaussianParams, ...]

    def __post_init__(self):
        if len(self.weights) != len(self.components) or not self.components:
            raise ValueError("weights and components must align and be non-empty")
        w = np.asarray(self.weights, dtype=float)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must lie on the standard simplex")

    @classmethod
    def single(cls, m: float, S: float) -> "GaussianMixtureState":
        return cls((1.0,), (GaussianParams(m, S),))

    @property
    def k(self) -> int:
        return len(self.components)

    def means(self) -> np.ndarray:
        return np.array([g.m for g in self.components])

    def variances(self) -> np.ndarray:
        return np.array([g.S for g in self.components])


def density(state: GaussianMixtureState, x):
    """Mixture density ``sum_l nu_l N(x; m_l, S_l)``, vectorized in ``x``."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x, dtype=float)
    for w, g in zip(state.weights, state.components):
        out += w * g.pdf(x)
    return out


def log_density(state: GaussianMixtureState, x):
    """Log of the mixture density via log-sum-exp (stable far in the tails)."""
    x = np.asarray(x, dtype=float)
    logs = np.stack([np.log(w) + g.logpdf(x) if w > 0 else np.full(x.shape, -np.inf)
                     for w, g in zip(state.weights, state.components)])
    top = np.max(logs, axis=0)
    return top + np.log(np.sum(np.exp(logs - top), axis=0))


def gaussian_moment(n: int, g: GaussianParams) -> float:
    """Raw moment ``E[X^n]`` of a scalar Gaussian for ``0 <= n <= 4``."""
    m, S = g.m, g.S
    if n == 0:
        return 1.0
    if n == 1:
        return m
    if n == 2:
        return m * m + S
    if n == 3:
        return m**3 + 3.0 * m * S
    if n == 4:
        return m**4 + 6.0 * m * m * S + 3.0 * S * S
    raise UnsupportedOrderError(f"moment order {n} outside 0..4")


def inverse_moment_approx(order: int, g: GaussianParams) -> float:
    """Low-order approximations of ``E[X^-1]`` and ``E[X^-2]``.

    ``E[X^-1] ~ 1/m`` and ``E[X^-2] ~ 1/(m^2+S)``; accurate when the mass
    sits well away from zero (S << m^2).
    """
    if order == 1:
        if abs(g.m) < MEAN_SINGULARITY_TOL:
            raise NearSingularMeanError(f"mean {g.m} too close to zero")
        return 1.0 / g.m
    if order == 2:
        return 1.0 / (g.m * g.m + g.S)
    raise UnsupportedOrderError(f"inverse moment order {order} outside 1..2")


def mixture_moments(state: GaussianMixtureState) -> tuple[float, float]:
    """Overall mean and variance of a Gaussian mixture."""
    w = np.asarray(state.weights)
    ms = state.means()
    Ss = state.variances()
    m = float(w @ ms)
    S = float(w @ Ss + w @ (ms * ms) - m * m)
    return m, S
