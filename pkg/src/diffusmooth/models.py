"""SDE model definitions, synthetic truth paths, and noisy discrete data.

Shipped model families (all scalar):

* ``gbm``  dX = kappa X dt + lam X dW
* ``cir``  dX = kappa (b - X) dt + lam sqrt(X) dW
* ``ou``   dX = -gamma X dt + sigma_c dW
* ``poly`` dX = f(X) dt + sqrt(a(X)) dW with polynomial f and a

Drift is stored as ascending polynomial coefficients of f(x); diffusion as
ascending coefficients of a(x) = sigma(x)^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import SimulationDivergedError

DEFAULT_TRUTH_STEPS = 2000


def _polyval(coeffs: tuple[float, ...], x):
    out = np.zeros_like(np.asarray(x, dtype=float))
    for c in reversed(coeffs):
        out = out * x + c
    return out


def _polyder(coeffs: tuple[float, ...]) -> tuple[float, ...]:
    return tuple(i * c for i, c in enumerate(coeffs))[1:] or (0.0,)


@dataclass(frozen=True)
class SdeModel:
    """Scalar diffusion dX = f(X) dt + sigma(X) dW with a = sigma^2."""

    kind: str
    drift_poly: tuple[float, ...]
    diffusion_poly: tuple[float, ...]
    params: tuple[tuple[str, float], ...] = field(default=())

    def __post_init__(self):
        if self.kind not in ("gbm", "cir", "ou", "poly"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if not self.drift_poly or not self.diffusion_poly:
            raise ValueError("drift and diffusion polynomials must be non-empty")
        if all(c == 0.0 for c in self.diffusion_poly) and self.kind != "gbm":
            raise ValueError("diffusion must not vanish identically")

    # -- constructors ------------------------------------------------------

    @classmethod
    def gbm(cls, kappa: float, lam: float) -> "SdeModel":
        if lam < 0:
            raise ValueError("lam must be nonnegative")
        return cls("gbm", (0.0, kappa), (0.0, 0.0, lam * lam),
                   (("kappa", kappa), ("lam", lam)))

    @classmethod
    def cir(cls, kappa: float, b: float, lam: float) -> "SdeModel":
        if lam <= 0:
            raise ValueError("lam must be positive")
        return cls("cir", (kappa * b, -kappa), (0.0, lam * lam),
                   (("kappa", kappa), ("b", b), ("lam", lam)))

    @classmethod
    def ou(cls, gamma: float, sigma_c: float) -> "SdeModel":
        if sigma_c <= 0:
            raise ValueError("sigma_c must be positive")
        return cls("ou", (0.0, -gamma), (sigma_c * sigma_c,),
                   (("gamma", gamma), ("sigma_c", sigma_c)))

    @classmethod
    def poly(cls, drift: tuple[float, ...], diffusion: tuple[float, ...]) -> "SdeModel":
        return cls("poly", tuple(float(c) for c in drift),
                   tuple(float(c) for c in diffusion))

    # -- evaluators --------------------------------------------------------

    def f(self, x):
        return _polyval(self.drift_poly, x)

    def a(self, x):
        return _polyval(self.diffusion_poly, x)

    def div_a(self, x):
        return _polyval(_polyder(self.diffusion_poly), x)

    def sigma(self, x):
        # CIR evaluates sqrt(max(a, 0)); harmless for the other families.
        return np.sqrt(np.clip(self.a(x), 0.0, None))

    # -- structure ---------------------------------------------------------

    @property
    def param_dict(self) -> dict[str, float]:
        return dict(self.params)

    @property
    def positive_state(self) -> bool:
        """Whether the state space is (0, inf)."""
        return self.kind in ("gbm", "cir")

    def monomial_diffusion(self) -> tuple[float, int] | None:
        """Return (c, d) if a(x) = c * x^d with a single term, else None."""
        nz = [(i, c) for i, c in enumerate(self.diffusion_poly) if c != 0.0]
        if len(nz) != 1:
            return None
        d, c = nz[0]
        return float(c), int(d)


@dataclass(frozen=True)
class InitialLaw:
    """Initial state distribution: log-normal or normal."""

    kind: str  # "lognormal" | "normal"
    mu: float
    sigma0: float

    def __post_init__(self):
        if self.kind not in ("lognormal", "normal"):
            raise ValueError(f"unknown initial law {self.kind!r}")
        if self.sigma0 <= 0:
            raise ValueError("sigma0 must be positive")

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "normal":
            z = (x - self.mu) / self.sigma0
            return np.exp(-0.5 * z * z) / (self.sigma0 * math.sqrt(2 * math.pi))
        out = np.zeros_like(x)
        pos = x > 0
        z = (np.log(x[pos]) - self.mu) / self.sigma0
        out[pos] = np.exp(-0.5 * z * z) / (x[pos] * self.sigma0 * math.sqrt(2 * math.pi))
        return out

    def cdf(self, x: float) -> float:
        if self.kind == "normal":
            z = (x - self.mu) / self.sigma0
        else:
            if x <= 0:
                return 0.0
            z = (math.log(x) - self.mu) / self.sigma0
        return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))

    def mean_var(self) -> tuple[float, float]:
        if self.kind == "normal":
            return self.mu, self.sigma0**2
        s2 = self.sigma0**2
        m = math.exp(self.mu + 0.5 * s2)
        return m, (math.exp(s2) - 1.0) * math.exp(2 * self.mu + s2)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        z = self.mu + self.sigma0 * rng.standard_normal(n)
        return np.exp(z) if self.kind == "lognormal" else z


@dataclass(frozen=True)
class MeasurementSet:
    """Noisy point observations y_k = x(t_k) + R xi_k with h(x) = x."""

    times: tuple[float, ...]
    values: tuple[float, ...]
    noise_std: float
    h: str = "identity"

    def __post_init__(self):
        t = np.asarray(self.times)
        if len(self.times) != len(self.values):
            raise ValueError("times and values must have equal length")
        if len(t) and (np.any(np.diff(t) <= 0) or t[0] <= 0):
            raise ValueError("measurement times must be strictly increasing and positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        if self.h != "identity":
            raise ValueError("only the identity observation function is supported")

    def __len__(self) -> int:
        return len(self.times)


@dataclass(frozen=True)
class SimPath:
    """Simulated trajectory on a uniform time grid."""

    times: np.ndarray
    values: np.ndarray  # (nt,) or (nt, n_paths)

    def value_at(self, t: float) -> float:
        if not 0.0 <= t <= self.times[-1] + 1e-12:
            raise ValueError(f"time {t} beyond path horizon {self.times[-1]}")
        if self.values.ndim != 1:
            raise ValueError("interpolation supported for single paths only")
        return float(np.interp(t, self.times, self.values))


def euler_maruyama(model: SdeModel, law: InitialLaw, dt: float, T: float,
                   seed: int, n_paths: int = 1) -> SimPath:
    """Simulate the model SDE with the Euler-Maruyama scheme.

    The grid has ``ceil(T/dt) + 1`` nodes; the effective step is ``T/n`` so the
    horizon is hit exactly.  CIR proposals that cross zero are reflected.
    Deterministic for fixed ``(inputs, seed)``.
    """
    if dt <= 0 or T <= 0 or dt > T:
        raise ValueError("need 0 < dt <= T")
    n = int(math.ceil(T / dt - 1e-12))
    h = T / n
    sq = math.sqrt(h)
    rng = np.random.default_rng(seed)
    x = law.sample(rng, n_paths)
    out = np.empty((n + 1, n_paths))
    out[0] = x
    reflect = model.kind == "cir"
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(n):
            x = x + model.f(x) * h + model.sigma(x) * sq * rng.standard_normal(n_paths)
            if reflect:
                x = np.abs(x)
            if not np.all(np.isfinite(x)):
                raise SimulationDivergedError(i + 1)
            out[i + 1] = x
    times = np.linspace(0.0, T, n + 1)
    return SimPath(times, out[:, 0] if n_paths == 1 else out)


def generate_measurements(path: SimPath, times, R: float, seed: int) -> MeasurementSet:
    """Observe the path at the given times through additive N(0, R^2) noise."""
    times = [float(t) for t in times]
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal(len(times))
    values = [path.value_at(t) + R * x for t, x in zip(times, xi)]
    return MeasurementSet(tuple(times), tuple(values), noise_std=R)


def prior_moment_flow(model: SdeModel, m0: float, S0: float, T: float,
                      steps: int = 400) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gaussian-closure flow of the prior mean/variance on [0, T].

    dm = E[f(X)], dS = 2 Cov(X, f(X)) + E[a(X)]; expectations closed over
    N(m, S).  Used for automatic grid sizing.
    """
    from .gaussian import GaussianParams, gaussian_moment

    def mom(n, m, S):
        return gaussian_moment(n, GaussianParams(m, max(S, 1e-12)))

    def rhs(m, S):
        Ef = sum(c * mom(i, m, S) for i, c in enumerate(model.drift_poly))
        Exf = sum(c * mom(i + 1, m, S) for i, c in enumerate(model.drift_poly))
        Ea = sum(c * mom(i, m, S) for i, c in enumerate(model.diffusion_poly))
        return Ef, 2.0 * (Exf - m * Ef) + Ea

    ts = np.linspace(0.0, T, steps + 1)
    ms = np.empty(steps + 1)
    Ss = np.empty(steps + 1)
    ms[0], Ss[0] = m0, S0
    hstep = T / steps
    m, S = m0, S0
    for i in range(steps):
        k1 = rhs(m, S)
        k2 = rhs(m + 0.5 * hstep * k1[0], S + 0.5 * hstep * k1[1])
        k3 = rhs(m + 0.5 * hstep * k2[0], S + 0.5 * hstep * k2[1])
        k4 = rhs(m + hstep * k3[0], S + hstep * k3[1])
        m += hstep / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        S += hstep / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        S = max(S, 1e-12)
        ms[i + 1], Ss[i + 1] = m, S
    return ts, ms, Ss
