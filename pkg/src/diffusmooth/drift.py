"""Gaussian-preserving drift construction and its coupled coefficient ODEs.

The approximating SDE shares the model diffusion ``sigma(x)`` and carries the
drift

    u(x,t) = a'(x)/2 + sum_l nu_l p_l(x) (A_l + B_l x + a(x)(C_l + D_l x)) / p(x)

whose marginals stay inside the chosen Gaussian mixture provided the
coefficients follow  dC/dt = -D A - B C,  dD/dt = -2 D B  and the component
moments follow the closed mean/variance ODEs below.  For the
Gaussian-consistent configuration C = eta/2 and D = theta.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ClosureUnsupportedError, ResolutionError, TailUnderflowError
from .gaussian import GaussianMixtureState, GaussianParams, gaussian_moment
from .models import SdeModel

MAX_DIFFUSION_DEGREE = 2


@dataclass(frozen=True)
class DriftCoefficients:
    """Per-component drift coefficients (arrays of shape (k,))."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        arrs = (self.A, self.B, self.C, self.D)
        if not all(a.shape == self.A.shape and a.ndim == 1 for a in arrs):
            raise ValueError("coefficient arrays must share a 1-d shape")
        if not all(np.all(np.isfinite(a)) for a in arrs):
            raise ValueError("coefficients must be finite")

    @classmethod
    def single(cls, A: float, B: float, C: float, D: float) -> "DriftCoefficients":
        return cls(*(np.array([v], dtype=float) for v in (A, B, C, D)))

    @classmethod
    def gaussian_consistent(cls, mix: GaussianMixtureState,
                            A=None, B=None) -> "DriftCoefficients":
        """Coefficients with (C, D) pinned to (eta/2, theta) of each component."""
        k = mix.k
        A = np.zeros(k) if A is None else np.broadcast_to(np.asarray(A, float), (k,)).copy()
        B = np.zeros(k) if B is None else np.broadcast_to(np.asarray(B, float), (k,)).copy()
        C = np.array([0.5 * g.eta for g in mix.components])
        D = np.array([g.theta for g in mix.components])
        return cls(A, B, C, D)

    @property
    def k(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True)
class OcpState:
    """Single-component state z = (m, S, C, D) used by the control solver."""

    m: float
    S: float
    C: float
    D: float

    def __post_init__(self):
        if self.S <= 0:
            raise ValueError("variance must be positive")

    @classmethod
    def gaussian_consistent(cls, m: float, S: float) -> "OcpState":
        return cls(m, S, 0.5 * m / S, -0.5 / S)

    def as_array(self) -> np.ndarray:
        return np.array([self.m, self.S, self.C, self.D])

    def gaussian(self) -> GaussianParams:
        return GaussianParams(self.m, self.S)


def ansatz_drift(x, coeffs: DriftCoefficients, mix: GaussianMixtureState,
                 model: SdeModel):
    """Evaluate the approximating drift u(x, t) at the points ``x``.

    For k = 1 the density ratio cancels and
    u = a'/2 + A + B x + a(x)(C + D x).  For mixtures the component terms are
    combined with responsibilities computed in the log domain.
    """
    x = np.asarray(x, dtype=float)
    a = model.a(x)
    base = 0.5 * model.div_a(x)
    if coeffs.k != mix.k:
        raise ValueError("coefficient and mixture component counts differ")
    if mix.k == 1:
        A, B, C, D = (arr[0] for arr in (coeffs.A, coeffs.B, coeffs.C, coeffs.D))
        return base + A + B * x + a * (C + D * x)
    logs = np.stack([np.log(w) + g.logpdf(x) if w > 0 else np.full(x.shape, -np.inf)
                     for w, g in zip(mix.weights, mix.components)])
    top = np.max(logs, axis=0)
    resp = np.exp(logs - top)
    resp_sum = resp.sum(axis=0)
    if not np.all(np.isfinite(resp_sum)) or np.any(resp_sum == 0.0):
        raise TailUnderflowError("mixture responsibilities degenerate at evaluation point")
    resp /= resp_sum
    terms = np.stack([coeffs.A[l] + coeffs.B[l] * x + a * (coeffs.C[l] + coeffs.D[l] * x)
                      for l in range(mix.k)])
    return base + np.sum(resp * terms, axis=0)


def coupling_rhs(coeffs: DriftCoefficients) -> tuple[np.ndarray, np.ndarray]:
    """Right-hand sides dC/dt = -D A - B C and dD/dt = -2 D B per component."""
    dC = -coeffs.D * coeffs.A - coeffs.B * coeffs.C
    dD = -2.0 * coeffs.D * coeffs.B
    return dC, dD


def _diffusion_degree(model: SdeModel) -> int:
    deg = max((i for i, c in enumerate(model.diffusion_poly) if c != 0.0), default=0)
    return deg


def moment_rhs(model: SdeModel, mix: GaussianMixtureState,
               coeffs: DriftCoefficients) -> tuple[np.ndarray, np.ndarray]:
    """Closed mean/variance ODE right-hand sides per mixture component.

    Valid for polynomial diffusion a(x) of degree <= 2, for which every
    expectation closes over Gaussian moments of order <= 4:

      dm = E[a']/2 + A + B m + C E[a] + D E[aX]
      dS = E[a'X] - m E[a'] + E[a] + 2 B S + 2 C (E[aX] - m E[a])
           + 2 D (E[aX^2] - m E[aX])
    """
    if _diffusion_degree(model) > MAX_DIFFUSION_DEGREE:
        raise ClosureUnsupportedError(
            f"moment closure requires diffusion degree <= {MAX_DIFFUSION_DEGREE}")
    if coeffs.k != mix.k:
        raise ValueError("coefficient and mixture component counts differ")
    apoly = model.diffusion_poly
    dm = np.empty(mix.k)
    dS = np.empty(mix.k)
    for l, g in enumerate(mix.components):
        mu = [gaussian_moment(n, g) for n in range(5)]
        e = [sum(c * mu[i + k] for i, c in enumerate(apoly)) for k in range(3)]
        gk = [sum(i * c * mu[i - 1 + k] for i, c in enumerate(apoly) if i > 0)
              for k in range(2)]
        m = g.m
        A, B, C, D = coeffs.A[l], coeffs.B[l], coeffs.C[l], coeffs.D[l]
        dm[l] = 0.5 * gk[0] + A + B * m + C * e[0] + D * e[1]
        dS[l] = (gk[1] - m * gk[0] + e[0] + 2.0 * B * g.S
                 + 2.0 * C * (e[1] - m * e[0]) + 2.0 * D * (e[2] - m * e[1]))
    return dm, dS


def integrate_consistent(model: SdeModel, mix0: GaussianMixtureState,
                         control, T: float, steps: int):
    """RK4-integrate the joint (m, S, C, D) system from a consistent start.

    ``control(t) -> (A(k,), B(k,))`` supplies the free coefficients.  Returns
    (times, means, variances, coeffs_list) with per-component columns.
    """
    k = mix0.k
    w = mix0.weights

    def pack(mix, C, D):
        return np.concatenate([mix.means(), mix.variances(), C, D])

    def rhs(t, y):
        ms, Ss, C, D = y[:k], y[k:2 * k], y[2 * k:3 * k], y[3 * k:]
        mix = GaussianMixtureState(w, tuple(GaussianParams(m, S) for m, S in zip(ms, Ss)))
        A, B = control(t)
        co = DriftCoefficients(np.asarray(A, float).reshape(k),
                               np.asarray(B, float).reshape(k), C.copy(), D.copy())
        dm, dS = moment_rhs(model, mix, co)
        dC, dD = coupling_rhs(co)
        return np.concatenate([dm, dS, dC, dD])

    co0 = DriftCoefficients.gaussian_consistent(mix0, *control(0.0))
    y = pack(mix0, co0.C, co0.D)
    h = T / steps
    times = np.linspace(0.0, T, steps + 1)
    mixes = []
    clist = []
    for i, t in enumerate(times):
        A, B = control(t)
        mix = GaussianMixtureState(w, tuple(
            GaussianParams(y[j], y[k + j]) for j in range(k)))
        mixes.append(mix)
        clist.append(DriftCoefficients(np.asarray(A, float).reshape(k),
                                       np.asarray(B, float).reshape(k),
                                       y[2 * k:3 * k].copy(), y[3 * k:].copy()))
        if i == steps:
            break
        k1 = rhs(t, y)
        k2 = rhs(t + 0.5 * h, y + 0.5 * h * k1)
        k3 = rhs(t + 0.5 * h, y + 0.5 * h * k2)
        k4 = rhs(t + h, y + h * k3)
        y = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return times, mixes, clist


def fokker_planck_residual(coeffs_trajectory, moment_trajectory, model: SdeModel,
                           grid: np.ndarray, times: np.ndarray) -> float:
    """Kolmogorov-forward residual of the implied density along a trajectory.

    Evaluates r = dp/dt + d/dx(u p) - (1/2) d^2/dx^2(a p) with second-order
    central differences in x and t, where p is the Gaussian(-mixture) density
    implied by the moment trajectory and u the matching drift.  Returns the
    maximum over interior times of ||r||_2 normalized by the largest
    constituent term; a consistent trajectory drives it to zero at the
    scheme's order.
    """
    grid = np.asarray(grid, dtype=float)
    times = np.asarray(times, dtype=float)
    if len(moment_trajectory) != len(times) or len(coeffs_trajectory) != len(times):
        raise ValueError("trajectory and time lengths differ")
    dx = grid[1] - grid[0]
    min_std = min(np.sqrt(g.S) for mix in moment_trajectory for g in mix.components)
    if dx > min_std / 10.0:
        raise ResolutionError(
            f"grid spacing {dx:.3g} coarser than a tenth of the smallest std {min_std:.3g}")

    from .gaussian import density as mixture_density

    a_vals = model.a(grid)
    worst = 0.0
    for j in range(1, len(times) - 1):
        dt_c = times[j + 1] - times[j - 1]
        p_prev = mixture_density(moment_trajectory[j - 1], grid)
        p_next = mixture_density(moment_trajectory[j + 1], grid)
        p_here = mixture_density(moment_trajectory[j], grid)
        u_here = ansatz_drift(grid, coeffs_trajectory[j], moment_trajectory[j], model)
        dpdt = (p_next - p_prev) / dt_c
        up = u_here * p_here
        ap = a_vals * p_here
        div_up = np.empty_like(up)
        div_up[1:-1] = (up[2:] - up[:-2]) / (2 * dx)
        lap_ap = np.empty_like(ap)
        lap_ap[1:-1] = (ap[2:] - 2 * ap[1:-1] + ap[:-2]) / (dx * dx)
        r = dpdt[1:-1] + div_up[1:-1] - 0.5 * lap_ap[1:-1]
        norm = lambda v: float(np.sqrt(np.sum(v * v) * dx))
        scale = max(norm(dpdt[1:-1]), norm(div_up[1:-1]), norm(0.5 * lap_ap[1:-1]))
        if scale == 0.0:
            continue
        worst = max(worst, norm(r) / scale)
    return worst
