import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffusmooth import (GaussianMixtureState, GaussianParams, density,
                         gaussian_moment, inverse_moment_approx,
                         mixture_moments)
from diffusmooth.exceptions import NearSingularMeanError, UnsupportedOrderError
from diffusmooth.gaussian import log_density

finite_means = st.floats(-5.0, 5.0)
variances = st.floats(0.01, 10.0)


class TestDensity:
    def test_standard_normal_mode(self):
        state = GaussianMixtureState.single(0.0, 1.0)
        assert density(state, 0.0) == pytest.approx(1.0 / math.sqrt(2 * math.pi),
                                                    abs=1e-12)

    def test_degenerate_mixture_equals_single(self):
        g = GaussianParams(0.3, 0.7)
        two = GaussianMixtureState((0.5, 0.5), (g, g))
        one = GaussianMixtureState.single(0.3, 0.7)
        x = np.linspace(-4, 4, 101)
        assert density(two, x) == pytest.approx(density(one, x), abs=1e-14)

    def test_quadrature_normalization(self):
        state = GaussianMixtureState(
            (0.2, 0.5, 0.3),
            (GaussianParams(-1.0, 0.5), GaussianParams(0.5, 1.5),
             GaussianParams(2.0, 0.2)))
        lo = min(g.m - 8 * math.sqrt(g.S) for g in state.components)
        hi = max(g.m + 8 * math.sqrt(g.S) for g in state.components)
        x = np.linspace(lo, hi, 4001)
        assert np.trapezoid(density(state, x), x) == pytest.approx(1.0, abs=1e-6)

    @given(finite_means, variances, st.floats(-20, 20))
    @settings(max_examples=50, deadline=None)
    def test_nonnegative_and_log_finite(self, m, S, x):
        state = GaussianMixtureState.single(m, S)
        assert density(state, x) >= 0.0
        assert np.isfinite(log_density(state, np.array([x])))[0]


class TestMoments:
    def test_standard_second_moment(self):
        assert gaussian_moment(2, GaussianParams(0.0, 1.0)) == 1.0

    def test_third_moment_closed_form(self):
        assert gaussian_moment(3, GaussianParams(1.0, 1.0)) == pytest.approx(4.0)

    def test_fourth_moment_value_and_monte_carlo(self):
        g = GaussianParams(2.0, 0.5)
        val = gaussian_moment(4, g)
        assert val == pytest.approx(28.75)
        rng = np.random.default_rng(0)
        draws = g.m + math.sqrt(g.S) * rng.standard_normal(1_000_000)
        x4 = draws**4
        se = x4.std(ddof=1) / math.sqrt(x4.size)
        assert abs(x4.mean() - val) < 3 * se

    def test_unsupported_order(self):
        with pytest.raises(UnsupportedOrderError):
            gaussian_moment(5, GaussianParams(0.0, 1.0))

    @given(finite_means, variances)
    @settings(max_examples=40, deadline=None)
    def test_moments_match_quadrature(self, m, S):
        g = GaussianParams(m, S)
        s = math.sqrt(S)
        x = np.linspace(m - 10 * s, m + 10 * s, 6001)
        pdf = g.pdf(x)
        for n in range(5):
            quad = np.trapezoid(x**n * pdf, x)
            assert gaussian_moment(n, g) == pytest.approx(quad, abs=1e-6 * max(1, abs(quad)))


class TestInverseMoments:
    def test_first_order_rule(self):
        assert inverse_moment_approx(1, GaussianParams(2.0, 1.0)) == pytest.approx(0.5)

    def test_second_order_rule(self):
        assert inverse_moment_approx(2, GaussianParams(1.0, 1.0)) == pytest.approx(0.5)

    def test_low_variance_against_monte_carlo(self):
        g = GaussianParams(1.0, 0.0001)
        rng = np.random.default_rng(1)
        draws = g.m + math.sqrt(g.S) * rng.standard_normal(400_000)
        mc = np.mean(1.0 / draws)
        assert inverse_moment_approx(1, g) == pytest.approx(mc, rel=1e-3)

    def test_near_singular_mean(self):
        with pytest.raises(NearSingularMeanError):
            inverse_moment_approx(1, GaussianParams(1e-9, 1.0))

    def test_unsupported_order(self):
        with pytest.raises(UnsupportedOrderError):
            inverse_moment_approx(3, GaussianParams(1.0, 1.0))


class TestMixtureMoments:
    def test_single_component_passthrough(self):
        m, S = mixture_moments(GaussianMixtureState.single(0.7, 0.3))
        assert (m, S) == (pytest.approx(0.7), pytest.approx(0.3))

    def test_symmetric_two_point(self):
        state = GaussianMixtureState(
            (0.5, 0.5), (GaussianParams(-1.0, 1.0), GaussianParams(1.0, 1.0)))
        m, S = mixture_moments(state)
        assert m == pytest.approx(0.0)
        assert S == pytest.approx(2.0)

    def test_against_quadrature(self):
        rng = np.random.default_rng(5)
        w = rng.dirichlet(np.ones(3))
        comps = tuple(GaussianParams(rng.uniform(-2, 2), rng.uniform(0.1, 2))
                      for _ in range(3))
        state = GaussianMixtureState(tuple(w), comps)
        x = np.linspace(-15, 15, 20001)
        pdf = density(state, x)
        m_q = np.trapezoid(x * pdf, x)
        S_q = np.trapezoid((x - m_q) ** 2 * pdf, x)
        m, S = mixture_moments(state)
        assert m == pytest.approx(m_q, abs=1e-6)
        assert S == pytest.approx(S_q, abs=1e-6)


class TestNaturalParameters:
    @given(finite_means, variances)
    @settings(max_examples=60, deadline=None)
    def test_roundtrip(self, m, S):
        g = GaussianParams(m, S)
        back = GaussianParams.from_natural(g.eta, g.theta)
        assert back.m == pytest.approx(m, rel=1e-12, abs=1e-12)
        assert back.S == pytest.approx(S, rel=1e-12)

    def test_variance_floor(self):
        with pytest.raises(ValueError):
            GaussianParams(0.0, 1e-12)

    def test_simplex_validation(self):
        g = GaussianParams(0.0, 1.0)
        with pytest.raises(ValueError):
            GaussianMixtureState((0.6, 0.6), (g, g))
        with pytest.raises(ValueError):
            GaussianMixtureState((-0.1, 1.1), (g, g))
