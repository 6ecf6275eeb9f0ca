"""Finite-difference filter/backward/smoothing baseline on a 1-D grid.

Between data times the filter density follows the Kolmogorov forward
equation  dp/dt = -(f p)' + ((a p)'')/2  and the backward function follows
dw/dt = -f w' - (a w'')/2 ; at each datum both are multiplied by the
Gaussian likelihood factor.  The smoothing density is the normalized
pointwise product p*w.

Schemes: Crank-Nicolson in time for both equations.  The forward equation is
discretized in flux form with Chang-Cooper exponential weighting of the
advective term (positivity-preserving, exact constant-coefficient steady
state).  The backward equation uses central differences with Il'in-style
fitted diffusion, which keeps the operator an M-matrix in
advection-dominated cells.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from .exceptions import (DegenerateProductError, DomainTooSmallError,
                         LogDomainError, SchemeInstabilityError)
from .models import InitialLaw, MeasurementSet, SdeModel, prior_moment_flow

_NEG_TOL = 1e-12


@dataclass(frozen=True)
class Grid1D:
    """Uniform spatial grid plus nominal time step."""

    x_min: float
    x_max: float
    nx: int
    dt: float

    def __post_init__(self):
        if not self.x_min < self.x_max:
            raise ValueError("x_min must be below x_max")
        if self.nx < 200:
            raise ValueError("nx must be at least 200")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.nx - 1)

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.nx)

    def stability(self, model: SdeModel) -> dict[str, float]:
        """Courant and cell-Peclet diagnostics for the chosen schemes."""
        x = self.nodes
        v = model.f(x) - 0.5 * model.div_a(x)
        a = model.a(x)
        courant = float(np.max(np.abs(v)) * self.dt / self.dx)
        with np.errstate(divide="ignore"):
            peclet = np.abs(model.f(x)) * self.dx / np.where(a > 0, a, np.inf)
        return {"courant": courant, "max_cell_peclet": float(np.max(peclet)),
                "diffusion_number": float(np.max(a) * self.dt / (2 * self.dx**2))}

    def check_stability(self, model: SdeModel) -> None:
        s = self.stability(model)
        if s["courant"] > 100.0:
            raise SchemeInstabilityError(
                f"Courant number {s['courant']:.1f} too large for accuracy")


@dataclass(frozen=True)
class GridDensity:
    """Nodal values of a density (or backward function) at one time."""

    grid: Grid1D
    values: np.ndarray
    time: float
    normalized: bool = False

    def mass(self) -> float:
        return float(np.trapezoid(self.values, self.grid.nodes))


@dataclass(frozen=True)
class PdeSolution:
    """Field values sampled on a set of output times."""

    grid: Grid1D
    times: np.ndarray
    values: np.ndarray  # (n_times, nx)
    kind: str  # "filter" | "backward" | "smoothing"
    runtime_s: float = 0.0

    def at(self, t: float) -> GridDensity:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"time {t} not among stored output times")
        return GridDensity(self.grid, self.values[i], float(self.times[i]),
                           normalized=self.kind in ("filter", "smoothing"))

    def densities(self) -> list[GridDensity]:
        return [self.at(t) for t in self.times]


# -- spatial operators ---------------------------------------------------


def _chang_cooper_delta(w: np.ndarray) -> np.ndarray:
    """Exponential upwind weight on the right node; 1/w - 1/(e^w - 1)."""
    out = np.empty_like(w)
    small = np.abs(w) < 1e-6
    out[small] = 0.5 - w[small] / 12.0
    big_pos = w > 30.0
    big_neg = w < -30.0
    out[big_pos] = 1.0 / w[big_pos]
    out[big_neg] = 1.0 + 1.0 / w[big_neg]
    mid = ~(small | big_pos | big_neg)
    out[mid] = 1.0 / w[mid] - 1.0 / np.expm1(w[mid])
    return out


def _forward_operator(model: SdeModel, grid: Grid1D):
    """Tridiagonal flux-form forward operator with Chang-Cooper weighting."""
    x = grid.nodes
    dx = grid.dx
    xm = 0.5 * (x[:-1] + x[1:])
    v = model.f(xm) - 0.5 * model.div_a(xm)
    Dm = 0.5 * model.a(xm)
    cc = np.empty_like(v)
    pos_D = Dm > 0
    w = np.empty_like(v)
    w[pos_D] = v[pos_D] * dx / Dm[pos_D]
    cc[pos_D] = _chang_cooper_delta(w[pos_D])
    # Pure advection cells: full upwind.
    cc[~pos_D] = np.where(v[~pos_D] > 0, 0.0, 1.0)
    # Flux J_{i+1/2} = cplus_i p_i + dplus_i p_{i+1}
    cplus = v * (1.0 - cc) + Dm / dx
    dplus = v * cc - Dm / dx
    lower = np.zeros(grid.nx)
    diag = np.zeros(grid.nx)
    upper = np.zeros(grid.nx)
    lower[1:-1] = cplus[:-1] / dx
    diag[1:-1] = (dplus[:-1] - cplus[1:]) / dx
    upper[1:-1] = -dplus[1:] / dx
    # Dirichlet rows at both ends (boundary nodes pinned to zero).
    return lower, diag, upper


def _backward_operator(model: SdeModel, grid: Grid1D):
    """Fitted-diffusion generator rows f q' + (a_eff/2) q'' with Neumann ends."""
    x = grid.nodes
    dx = grid.dx
    f = model.f(x)
    a = model.a(x)
    beta = np.zeros_like(a)
    pos = a > 0
    beta[pos] = f[pos] * dx / a[pos]
    a_eff = np.empty_like(a)
    small = np.abs(beta) < 1e-4
    a_eff[small & pos] = a[small & pos] * (1.0 + beta[small & pos] ** 2 / 3.0)
    mid = pos & ~small & (np.abs(beta) < 30.0)
    a_eff[mid] = a[mid] * beta[mid] / np.tanh(beta[mid])
    big = pos & (np.abs(beta) >= 30.0)
    a_eff[big] = a[big] * np.abs(beta[big])
    a_eff[~pos] = np.abs(f[~pos]) * dx  # upwind-equivalent artificial diffusion
    half = 0.5 * a_eff / (dx * dx)
    adv = f / (2.0 * dx)
    lower = -adv + half
    diag = -2.0 * half
    upper = adv + half
    # Mirror ghosts q_{-1} = q_1 and q_{nx} = q_{nx-2}.
    lower_out = lower.copy()
    upper_out = upper.copy()
    upper_out[0] = upper[0] + lower[0]
    lower_out[-1] = lower[-1] + upper[-1]
    lower_out[0] = 0.0
    upper_out[-1] = 0.0
    return lower_out, diag, upper_out


class _CrankNicolson:
    """CN stepper for dq/dt = L q with a constant tridiagonal L."""

    def __init__(self, lower, diag, upper, dt, pinned_ends: bool):
        n = diag.size
        self.pinned = pinned_ends
        self.lower, self.diag, self.upper = lower, diag, upper
        ab = np.zeros((3, n))
        ab[0, 1:] = -0.5 * dt * upper[:-1]
        ab[1, :] = 1.0 - 0.5 * dt * diag
        ab[2, :-1] = -0.5 * dt * lower[1:]
        if pinned_ends:
            ab[1, 0] = ab[1, -1] = 1.0
            ab[0, 1] = ab[2, -2] = 0.0
        self.ab = ab
        self.dt = dt

    def _apply_explicit(self, q):
        out = q + 0.5 * self.dt * (self.diag * q)
        out[:-1] += 0.5 * self.dt * self.upper[:-1] * q[1:]
        out[1:] += 0.5 * self.dt * self.lower[1:] * q[:-1]
        if self.pinned:
            out[0] = 0.0
            out[-1] = 0.0
        return out

    def step(self, q):
        return solve_banded((1, 1), self.ab, self._apply_explicit(q),
                            overwrite_b=True, check_finite=False)


def _check_horizon(meas: MeasurementSet, T: float) -> None:
    if len(meas) and meas.times[-1] > T + 1e-12:
        raise ValueError(
            f"measurement time {meas.times[-1]} beyond the horizon {T}")


def _time_plan(T: float, dt: float, special: list[float]) -> list[tuple[float, float, int]]:
    """Segments between consecutive special times, each split into CN steps."""
    pts = sorted({0.0, T, *(float(t) for t in special if 0.0 <= t <= T + 1e-12)})
    plan = []
    for t0, t1 in zip(pts[:-1], pts[1:]):
        if t1 - t0 < 1e-14:
            continue
        n = max(1, int(math.ceil((t1 - t0) / dt - 1e-9)))
        plan.append((t0, t1, n))
    return plan


def _likelihood_factor(x: np.ndarray, y: float, R: float) -> np.ndarray:
    # exp(y h/R^2 - h^2/(2R^2)) up to the data-only constant exp(-y^2/(2R^2)).
    if R <= 0:
        raise ValueError("measurement noise std must be positive for smoothing")
    return np.exp(-0.5 * ((x - y) / R) ** 2)


def _postprocess_step(values: np.ndarray, what: str) -> np.ndarray:
    worst = float(values.min(initial=0.0))
    scale = float(np.max(np.abs(values)))
    if worst < -_NEG_TOL * max(scale, 1.0):
        raise SchemeInstabilityError(
            f"{what} developed negative values ({worst:.3e})")
    return np.clip(values, 0.0, None)


def initial_density(law: InitialLaw, grid: Grid1D) -> GridDensity:
    """The initial law sampled on the grid, trapezoid-normalized."""
    outside = law.cdf(grid.x_min) + (1.0 - law.cdf(grid.x_max))
    if outside > 1e-8:
        raise DomainTooSmallError(f"initial mass outside the grid: {outside:.2e}")
    x = grid.nodes
    p = law.pdf(x)
    return GridDensity(grid, p / np.trapezoid(p, x), 0.0, normalized=True)


def solve_forward(model: SdeModel, law: InitialLaw, meas: MeasurementSet,
                  grid: Grid1D, T: float, output_times=None) -> PdeSolution:
    """Evolve the filter density with jumps at the data times.

    The density is renormalized only at jumps; mass drift in between is
    monitored and more than 1e-4 cumulative leakage raises
    ``DomainTooSmallError``.
    """
    import time as _time
    t0_wall = _time.perf_counter()
    _check_horizon(meas, T)
    grid.check_stability(model)
    x = grid.nodes
    p = initial_density(law, grid).values
    stepper = _CrankNicolson(*_forward_operator(model, grid), grid.dt, pinned_ends=True)
    out_times = _resolve_output_times(T, grid.dt, meas, output_times)
    data_by_time = dict(zip(meas.times, meas.values))
    plan = _time_plan(T, grid.dt, list(meas.times) + list(out_times))
    collector = _OutputCollector(grid, out_times)
    mass_ref = 1.0
    collector.offer(0.0, p)
    if 0.0 in data_by_time:  # pragma: no cover - times are strictly positive
        raise ValueError("measurements at t=0 unsupported")
    for (t0, t1, n) in plan:
        sub_dt = (t1 - t0) / n
        sub = _CrankNicolson(*_forward_operator(model, grid), sub_dt, True) \
            if abs(sub_dt - grid.dt) > 1e-15 else stepper
        for _ in range(n):
            p = sub.step(p)
        p = _postprocess_step(p, "filter density")
        mass = np.trapezoid(p, x)
        if abs(mass - mass_ref) > 1e-4:
            raise DomainTooSmallError(
                f"mass leakage {abs(mass - mass_ref):.2e} exceeds 1e-4 at t={t1:.4g}")
        for tk, yk in data_by_time.items():
            if abs(tk - t1) < 1e-12:
                p = p * _likelihood_factor(x, yk, meas.noise_std)
                norm = np.trapezoid(p, x)
                if norm <= 0:
                    raise DegenerateProductError("filter jump annihilated the density")
                p = p / norm
                mass_ref = 1.0
        collector.offer(t1, p)
    return PdeSolution(grid, *collector.result(), kind="filter",
                       runtime_s=_time.perf_counter() - t0_wall)


def solve_backward(model: SdeModel, meas: MeasurementSet, grid: Grid1D, T: float,
                   output_times=None) -> PdeSolution:
    """Evolve the backward function from w(x,T)=1 down to t=0.

    Each datum multiplies w by the likelihood factor as it is crossed
    (a datum at t=T is applied immediately, matching a Gaussian terminal
    condition).  The function is rescaled to unit maximum every step; the
    scale cancels in the smoothing product.
    """
    import time as _time
    t0_wall = _time.perf_counter()
    _check_horizon(meas, T)
    x = grid.nodes
    w = np.ones(grid.nx)
    stepper = _CrankNicolson(*_backward_operator(model, grid), grid.dt, pinned_ends=False)
    out_times = _resolve_output_times(T, grid.dt, meas, output_times)
    plan = _time_plan(T, grid.dt, list(meas.times) + list(out_times))
    collector = _OutputCollector(grid, out_times)
    collector.offer(T, w)
    data_by_time = dict(zip(meas.times, meas.values))
    for (t0, t1, n) in reversed(plan):
        for tk, yk in data_by_time.items():
            if abs(tk - t1) < 1e-12:
                w = w * _likelihood_factor(x, yk, meas.noise_std)
                w = w / np.max(w)
        sub_dt = (t1 - t0) / n
        sub = _CrankNicolson(*_backward_operator(model, grid), sub_dt, False) \
            if abs(sub_dt - grid.dt) > 1e-15 else stepper
        for _ in range(n):
            w = sub.step(w)
            w = w / np.max(w)
        w = _postprocess_step(w, "backward function")
        collector.offer(t0, w)
    times, values = collector.result()
    return PdeSolution(grid, times, values, kind="backward",
                       runtime_s=_time.perf_counter() - t0_wall)


class _OutputCollector:
    def __init__(self, grid: Grid1D, out_times: np.ndarray):
        self.grid = grid
        self.wanted = list(out_times)
        self.times: list[float] = []
        self.rows: list[np.ndarray] = []

    def offer(self, t: float, values: np.ndarray) -> None:
        for tw in self.wanted:
            if abs(tw - t) < 1e-12:
                self.times.append(tw)
                self.rows.append(values.copy())

    def result(self) -> tuple[np.ndarray, np.ndarray]:
        order = np.argsort(self.times)
        times = np.array(self.times)[order]
        rows = np.stack([self.rows[i] for i in order])
        uniq, idx = np.unique(np.round(times, 12), return_index=True)
        return times[idx], rows[idx]


def _resolve_output_times(T: float, dt: float, meas: MeasurementSet,
                          output_times) -> np.ndarray:
    if output_times is None:
        n = max(2, int(round(T / dt)))
        n = min(n, 400)
        base = np.linspace(0.0, T, n + 1)
    else:
        base = np.asarray(sorted(set(float(t) for t in output_times)))
        if base.size == 0 or base[0] < -1e-12 or base[-1] > T + 1e-9:
            raise ValueError("output times must lie inside [0, T]")
    merged = sorted(set(np.concatenate([base, [0.0, T], np.asarray(meas.times)])))
    return np.asarray(merged)


def smoothing_density(p: GridDensity, w: GridDensity) -> GridDensity:
    """Normalized pointwise product of filter density and backward function."""
    if p.grid != w.grid:
        raise ValueError("filter and backward function live on different grids")
    if abs(p.time - w.time) > 1e-9 * max(1.0, abs(p.time)):
        raise ValueError("filter and backward time stamps differ")
    prod = p.values * w.values
    mass = float(np.trapezoid(prod, p.grid.nodes))
    if mass < 1e-300:
        raise DegenerateProductError("smoothing product has vanishing mass")
    return GridDensity(p.grid, prod / mass, p.time, normalized=True)


def smoothing_solution(forward: PdeSolution, backward: PdeSolution) -> PdeSolution:
    """Smoothing densities at the common output times."""
    common = sorted(set(np.round(forward.times, 12)) & set(np.round(backward.times, 12)))
    rows = []
    for t in common:
        rows.append(smoothing_density(forward.at(float(t)), backward.at(float(t))).values)
    return PdeSolution(forward.grid, np.asarray(common), np.stack(rows), kind="smoothing")


def posterior_drift(w: GridDensity, model: SdeModel) -> np.ndarray:
    """Posterior drift g = f + a (log w)' on the grid (central differences)."""
    vals = w.values
    if np.any(vals[1:-1] <= 0):
        raise LogDomainError("backward function must be positive on interior nodes")
    x = w.grid.nodes
    logw = np.log(np.clip(vals, 1e-300, None))
    dlog = np.gradient(logw, x)
    return model.f(x) + model.a(x) * dlog


def grid_moments(d: GridDensity) -> tuple[float, float]:
    """Trapezoid mean and central second moment of a normalized grid density."""
    if not d.normalized:
        raise ValueError("grid_moments requires a normalized density")
    x = d.grid.nodes
    m = float(np.trapezoid(x * d.values, x))
    S = float(np.trapezoid((x - m) ** 2 * d.values, x))
    return m, S


def smoothing_residual(forward: PdeSolution, backward: PdeSolution,
                       model: SdeModel, exclude_times=()) -> float:
    """Forward-equation residual of the smoothing density under the posterior
    drift, normalized like the drift-construction residual.  Serves as the
    numerical consistency diagnostic for the p*w factorization.

    Time stencils that straddle one of ``exclude_times`` (the data times,
    where the posterior drift is discontinuous) are skipped.
    """
    common = [t for t in forward.times if np.any(np.isclose(backward.times, t))]
    x = forward.grid.nodes
    dx = forward.grid.dx
    worst = 0.0
    for j in range(1, len(common) - 1):
        tm, t0, tp = common[j - 1], common[j], common[j + 1]
        if any(tm - 1e-12 <= te <= tp + 1e-12 for te in exclude_times):
            continue
        ps_m = smoothing_density(forward.at(tm), backward.at(tm)).values
        ps_0 = smoothing_density(forward.at(t0), backward.at(t0)).values
        ps_p = smoothing_density(forward.at(tp), backward.at(tp)).values
        g = posterior_drift(backward.at(t0), model)
        dpdt = (ps_p - ps_m) / (tp - tm)
        gp = g * ps_0
        ap = model.a(x) * ps_0
        div = np.empty_like(gp)
        div[1:-1] = (gp[2:] - gp[:-2]) / (2 * dx)
        lap = np.empty_like(ap)
        lap[1:-1] = (ap[2:] - 2 * ap[1:-1] + ap[:-2]) / (dx * dx)
        r = dpdt[1:-1] + div[1:-1] - 0.5 * lap[1:-1]
        norm = lambda v: float(np.sqrt(np.sum(v * v) * dx))
        scale = max(norm(dpdt[1:-1]), norm(div[1:-1]), norm(0.5 * lap[1:-1]))
        if scale > 0:
            worst = max(worst, norm(r) / scale)
    return worst


def auto_domain(model: SdeModel, law: InitialLaw, meas: MeasurementSet,
                T: float) -> tuple[float, float]:
    """Heuristic grid bounds wide enough for prior flow, tails, and data."""
    m0, S0 = law.mean_var()
    _, ms, Ss = prior_moment_flow(model, m0, S0, T)
    spread = math.sqrt(float(np.max(Ss)))
    lo = float(np.min(ms)) - 8.0 * spread
    hi = float(np.max(ms)) + 8.0 * spread
    if law.kind == "lognormal":
        grow_up = max(1.0, float(np.max(ms)) / ms[0])
        grow_dn = min(1.0, float(np.min(ms)) / ms[0])
        lo = min(lo, math.exp(law.mu - 7.0 * law.sigma0) * grow_dn)
        hi = max(hi, math.exp(law.mu + 7.0 * law.sigma0) * grow_up)
    if len(meas):
        r = meas.noise_std
        lo = min(lo, min(meas.values) - 6.0 * r)
        hi = max(hi, max(meas.values) + 6.0 * r)
    if model.positive_state:
        lo = max(lo, hi * 1e-4)
    return lo, hi
