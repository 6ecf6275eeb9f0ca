"""Independent reference implementations and divergence metrics.

The Kalman/RTS smoother uses exact scalar OU transition moments, so on the
linear-Gaussian subfamily its only error source is floating-point arithmetic;
it outranks the grid and variational solvers it judges.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import SupportMismatchError, UnreliableEstimateError
from .models import InitialLaw, MeasurementSet, SdeModel

_DENSITY_TINY = 1e-300


@dataclass(frozen=True)
class LinearModel:
    """Scalar linear SDE dX = alpha X dt + sigma_c dW observed as y = x + noise."""

    alpha: float
    sigma_c: float
    noise_std: float

    def __post_init__(self):
        if self.sigma_c <= 0 or self.noise_std <= 0:
            raise ValueError("sigma_c and noise_std must be positive")


def _transition(alpha: float, sigma_c: float, dt: float) -> tuple[float, float]:
    """Exact OU transition: mean factor and added variance over dt."""
    F = math.exp(alpha * dt)
    if abs(alpha) < 1e-14:
        Q = sigma_c * sigma_c * dt
    else:
        Q = sigma_c * sigma_c * (math.exp(2 * alpha * dt) - 1.0) / (2 * alpha)
    return F, Q


@dataclass(frozen=True)
class KalmanResult:
    times: np.ndarray
    filter_mean: np.ndarray
    filter_var: np.ndarray
    smoother_mean: np.ndarray
    smoother_var: np.ndarray
    log_likelihood: float

    def at(self, t: float) -> tuple[float, float]:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-9:
            raise ValueError(f"time {t} not on the oracle grid")
        return float(self.smoother_mean[i]), float(self.smoother_var[i])


def kalman_rts(model: LinearModel, m0: float, S0: float, meas: MeasurementSet,
               output_times=None) -> KalmanResult:
    """Exact discrete-time Kalman filter + RTS smoother for the linear model.

    ``output_times`` are merged into the measurement grid as predict-only
    nodes, so smoother marginals are exact at every requested time.
    """
    data_times = list(meas.times)
    extra = [] if output_times is None else [float(t) for t in output_times]
    grid = sorted(set([0.0] + data_times + extra))
    t_arr = np.array(grid)
    is_datum = {t: y for t, y in zip(meas.times, meas.values)}
    R2 = meas.noise_std**2

    n = len(grid)
    mf = np.empty(n)
    Sf = np.empty(n)
    mp = np.empty(n)  # predictive moments at each node (prior to update)
    Sp = np.empty(n)
    Fs = np.empty(n)  # transition factor from node i-1 to i
    loglik = 0.0

    m, S = m0, S0
    for i, t in enumerate(grid):
        if i == 0:
            F = 1.0
        else:
            F, Q = _transition(model.alpha, model.sigma_c, t - grid[i - 1])
            m = F * m
            S = F * F * S + Q
        Fs[i] = F
        mp[i], Sp[i] = m, S
        y = is_datum.get(t)
        if y is not None:
            innov_var = S + R2
            loglik += -0.5 * (math.log(2 * math.pi * innov_var) + (y - m)**2 / innov_var)
            K = S / innov_var
            m = m + K * (y - m)
            S = (1.0 - K) * S
        mf[i], Sf[i] = m, S

    ms = mf.copy()
    Ss = Sf.copy()
    for i in range(n - 2, -1, -1):
        G = Sf[i] * Fs[i + 1] / Sp[i + 1]
        ms[i] = mf[i] + G * (ms[i + 1] - mp[i + 1])
        Ss[i] = Sf[i] + G * G * (Ss[i + 1] - Sp[i + 1])

    return KalmanResult(t_arr, mf, Sf, ms, Ss, loglik)


def mc_girsanov_kl(model_p: SdeModel, drift_q, law: InitialLaw, T: float,
                   n_paths: int, dt: float, seed: int) -> tuple[float, float]:
    """Monte-Carlo estimate of KL(Q || P) for same-diffusion path laws.

    Simulates Euler paths of the Q dynamics (drift ``drift_q(x, t)``, model
    diffusion) and averages (1/2) int (u - f)^2 / a dt.  Returns (estimate,
    standard error).  Non-finite paths are dropped; more than 1% exclusions
    raises ``UnreliableEstimateError``.
    """
    n = int(math.ceil(T / dt - 1e-12))
    h = T / n
    sq = math.sqrt(h)
    rng = np.random.default_rng(seed)
    x = law.sample(rng, n_paths)
    acc = np.zeros(n_paths)
    alive = np.ones(n_paths, dtype=bool)
    reflect = model_p.kind == "cir"
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        for i in range(n):
            t = i * h
            u = drift_q(x, t)
            f = model_p.f(x)
            a = model_p.a(x)
            rate = 0.5 * (u - f) ** 2 / a
            acc += np.where(alive & np.isfinite(rate), rate * h, 0.0)
            x = x + u * h + model_p.sigma(x) * sq * rng.standard_normal(n_paths)
            if reflect:
                x = np.abs(x)
            alive &= np.isfinite(x) & np.isfinite(rate)
    kept = int(alive.sum())
    if kept < 0.99 * n_paths:
        raise UnreliableEstimateError(
            f"{n_paths - kept} of {n_paths} paths diverged")
    vals = acc[alive]
    est = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(kept)) if kept > 1 else 0.0
    return est, se


def grid_kl(p, q_density) -> float:
    """Trapezoid KL(p || q) between a grid density and a positive density.

    ``p`` is a GridDensity (normalized); ``q_density(x)`` is evaluated on the
    grid and trapezoid-normalized there, which makes the discrete divergence
    nonnegative by construction.  Nodes with p below 1e-300 contribute zero.
    """
    x = p.grid.nodes
    pv = np.asarray(p.values, dtype=float)
    qv = np.asarray(q_density(x), dtype=float)
    if np.any(qv < 0) or not np.all(np.isfinite(qv)):
        raise ValueError("reference density must be finite and nonnegative")
    mass_mask = pv > 1e-8
    if np.any(qv[mass_mask] < _DENSITY_TINY):
        raise SupportMismatchError("reference density underflows where p has mass")
    w = np.gradient(x)  # trapezoid weights on a uniform grid
    pw = pv * w
    pw = pw / pw.sum()
    qw = qv * w
    qw = qw / qw.sum()
    # Tail nodes where the reference underflows to an exact zero carry p
    # below 1e-8 (checked above) and contribute nothing.
    keep = (pw > _DENSITY_TINY) & (qw > 0.0)
    val = float(np.sum(pw[keep] * np.log(pw[keep] / qw[keep])))
    # nonnegative by the Gibbs inequality; clip summation rounding
    return max(0.0, val)
