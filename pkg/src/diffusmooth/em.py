"""EM-type drift-parameter inference.

Alternates variational smoothing at the current parameter (E-step) with
minimization of the apparent information over the parameter (M-step).  Only
the relative-entropy part depends on the parameter, and for drift families
affine in kappa, f_kappa = f0 + kappa * df, it is a quadratic in kappa with
closed-form minimizer

    kappa* = int E[(u - f0) df / a] dt / int E[df^2 / a] dt

with all expectations closed over the trajectory's Gaussian marginals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import DiffusmoothError, UnidentifiableParameterError
from .models import InitialLaw, MeasurementSet, SdeModel
from .ocp import (OcpTrajectory, ShootOptions, _mu_tables, closure_for,
                  expected_measurement_penalty, initial_condition_from_backward,
                  shoot)
from .pde import Grid1D, initial_density, solve_backward


@dataclass(frozen=True)
class ParametricFamily:
    """Drift family f_kappa(x) = f0(x) + kappa * df(x) with fixed diffusion."""

    kind: str  # "gbm" | "cir" | "ou"
    fixed: tuple[tuple[str, float], ...]

    @classmethod
    def gbm(cls, lam: float) -> "ParametricFamily":
        return cls("gbm", (("lam", lam),))

    @classmethod
    def cir(cls, b: float, lam: float) -> "ParametricFamily":
        return cls("cir", (("b", b), ("lam", lam)))

    @classmethod
    def ou(cls, sigma_c: float) -> "ParametricFamily":
        return cls("ou", (("sigma_c", sigma_c),))

    def instantiate(self, kappa: float) -> SdeModel:
        p = dict(self.fixed)
        if self.kind == "gbm":
            return SdeModel.gbm(kappa, p["lam"])
        if self.kind == "cir":
            return SdeModel.cir(kappa, p["b"], p["lam"])
        return SdeModel.ou(kappa, p["sigma_c"])

    def drift_basis(self) -> tuple[np.ndarray, np.ndarray]:
        """(f0, df) polynomial coefficients with f_kappa = f0 + kappa df."""
        p = dict(self.fixed)
        if self.kind == "gbm":
            return np.zeros(2), np.array([0.0, 1.0])
        if self.kind == "cir":
            return np.zeros(2), np.array([p["b"], -1.0])
        return np.zeros(2), np.array([0.0, -1.0])


@dataclass(frozen=True)
class EmIterate:
    kappa: float
    apparent_information: float
    kl_part: float
    converged: bool
    bound_gap: float  # F(Q_i, kappa_i) - F(Q_i, kappa_{i+1}) >= 0 by argmin


@dataclass(frozen=True)
class EmRun:
    iterates: tuple[EmIterate, ...]
    kappa_hat: float
    converged: bool
    partial: bool

    @property
    def kappas(self) -> np.ndarray:
        return np.array([it.kappa for it in self.iterates])


@dataclass(frozen=True)
class EmContext:
    """Everything an E-step needs besides the parameter."""

    family: ParametricFamily
    law: InitialLaw
    meas: MeasurementSet
    T: float
    grid: Grid1D
    options: ShootOptions = ShootOptions()


def inference_domain(family: ParametricFamily, kappa_max: float,
                     law: InitialLaw, meas: MeasurementSet,
                     T: float) -> tuple[float, float]:
    """Data-driven grid bounds for parameter inference.

    During EM the drift parameter can be far from the truth, so prior-flow
    bounds are either too wide (explosive drift) or too narrow (the backward
    function reaches beyond the data range when mapped through fast
    dynamics).  Bounds here cover the initial law, the data with noise pads,
    and an exponential backward-reach factor exp(|f'| * max gap) for the
    steepest admissible drift.
    """
    m0, S0 = law.mean_var()
    s0 = math.sqrt(S0)
    if law.kind == "lognormal":
        law_lo = math.exp(law.mu - 7 * law.sigma0)
        law_hi = math.exp(law.mu + 7 * law.sigma0)
    else:
        law_lo, law_hi = m0 - 8 * s0, m0 + 8 * s0
    R = meas.noise_std
    lo = min(law_lo, min(meas.values) - 8 * R)
    hi = max(law_hi, max(meas.values) + 8 * R)
    model = family.instantiate(kappa_max)
    probe = np.linspace(min(lo, hi * 1e-3), hi, 200)
    h = probe[1] - probe[0]
    slope = float(np.max(np.abs(np.diff(model.f(probe)) / h)))
    special = [0.0, *meas.times, T]
    gap = float(np.max(np.diff(sorted(special))))
    factor = math.exp(min(slope * gap, 2.5))
    if model.positive_state:
        lo, hi = lo / factor, hi * factor
        lo = max(lo, hi * 1e-4)
    else:
        pad = (hi - lo) * (factor - 1.0)
        lo, hi = lo - pad, hi + pad
    return lo, hi


def e_step(kappa: float, ctx: EmContext, rho_init=None) -> OcpTrajectory:
    """Variational smoothing at the given parameter.

    The backward function (and hence the initial smoothing moments) depends
    on the drift, so it is recomputed at every parameter value.
    """
    model = ctx.family.instantiate(kappa)
    p0 = initial_density(ctx.law, ctx.grid)
    bwd = solve_backward(model, ctx.meas, ctx.grid, ctx.T, output_times=[0.0])
    z0 = initial_condition_from_backward(p0, bwd.at(0.0))
    return shoot(z0, model, ctx.meas, ctx.T, ctx.options, rho_init=rho_init)


@dataclass(frozen=True)
class KappaQuadratic:
    """Apparent information as a quadratic in kappa for a fixed smoother Q."""

    base: float       # int E[(u-f0)^2/(2a)] dt
    linear: float     # int E[(u-f0) df / a] dt
    curvature: float  # int E[df^2 / a] dt
    penalty: float    # measurement penalties (kappa-free)

    def value(self, kappa: float) -> float:
        return (self.base - kappa * self.linear
                + 0.5 * kappa * kappa * self.curvature + self.penalty)

    def kl_part(self, kappa: float) -> float:
        return self.base - kappa * self.linear + 0.5 * kappa**2 * self.curvature

    @property
    def minimizer(self) -> float:
        if self.curvature < 1e-12:
            raise UnidentifiableParameterError(
                f"parameter curvature {self.curvature:.3e} below 1e-12")
        return self.linear / self.curvature


def kappa_quadratic(traj: OcpTrajectory, family: ParametricFamily,
                    meas: MeasurementSet,
                    refined_inverse_moments: bool = True) -> KappaQuadratic:
    """Quadrature of the kappa-dependence of the apparent information."""
    model_ref = family.instantiate(0.0)
    closure = closure_for(model_ref)
    c, d = closure.mono_c, closure.mono_d
    a3 = np.array(closure.a_poly)
    da2 = np.array(closure.da_poly)
    f0, df = family.drift_basis()
    f0 = np.concatenate([f0, np.zeros(2)])
    n = len(traj.times)
    base_t = np.empty(n)
    lin_t = np.empty(n)
    curv_t = np.empty(n)
    for i in range(n):
        m, S, C, D = traj.z[i]
        A, B = traj.v[i]
        mu, _, _ = _mu_tables(m, S, closure, refined_inverse_moments)
        u = np.array([0.5 * da2[0] + A + C * a3[0],
                      0.5 * da2[1] + B + C * a3[1] + D * a3[0],
                      C * a3[2] + D * a3[1],
                      D * a3[2]])
        r = u - f0

        def expect(poly):
            acc = 0.0
            for j, pj in enumerate(poly):
                if pj != 0.0:
                    acc += pj * mu[2 + j - d]
            return acc / c

        base_t[i] = 0.5 * expect(np.convolve(r, r))
        lin_t[i] = expect(np.convolve(r, df))
        curv_t[i] = expect(np.convolve(df, df))
    penalty = 0.0
    for tk, yk in zip(meas.times, meas.values):
        z = traj.state_at(tk)
        penalty += expected_measurement_penalty(z, yk, meas.noise_std)
    return KappaQuadratic(
        base=float(np.trapezoid(base_t, traj.times)),
        linear=float(np.trapezoid(lin_t, traj.times)),
        curvature=float(np.trapezoid(curv_t, traj.times)),
        penalty=penalty,
    )


def m_step(traj: OcpTrajectory, family: ParametricFamily, meas: MeasurementSet,
           refined_inverse_moments: bool = True) -> float:
    """Closed-form parameter update kappa* = argmin of the quadratic bound."""
    return kappa_quadratic(traj, family, meas, refined_inverse_moments).minimizer


def run_em(ctx: EmContext, kappa0: float, max_iters: int = 10,
           tol: float = 1e-4) -> EmRun:
    """Alternate E- and M-steps until the parameter settles.

    Any E-step failure terminates the run and returns the completed iterates
    flagged ``partial``.  The within-iteration bound F(Q_i, kappa_{i+1}) <=
    F(Q_i, kappa_i) holds exactly by the argmin property.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be at least 1")
    refined = ctx.options.refined_inverse_moments
    kappa = float(kappa0)
    iterates: list[EmIterate] = []
    partial = False
    converged = False
    rho_ws = None
    for _ in range(max_iters):
        try:
            traj = e_step(kappa, ctx, rho_init=rho_ws)
        except DiffusmoothError:
            partial = True
            break
        rho_ws = traj.rho[0].copy()
        quad = kappa_quadratic(traj, ctx.family, ctx.meas, refined)
        kappa_next = quad.minimizer
        iterates.append(EmIterate(kappa, quad.value(kappa), quad.kl_part(kappa),
                                  traj.converged,
                                  quad.value(kappa) - quad.value(kappa_next)))
        if abs(kappa_next - kappa) < tol:
            converged = True
            break
        kappa = kappa_next
    if not iterates:
        raise UnidentifiableParameterError("EM made no progress: first E-step failed")
    return EmRun(tuple(iterates), kappa_hat=kappa, converged=converged,
                 partial=partial)
