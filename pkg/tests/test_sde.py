"""Forward kernels, non-uniform assembly and the reverse integrators."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from nudiff import (
    ContractError,
    DomainError,
    NonUniformSde,
    NumericalError,
    SdeSpec,
    TimeGrid,
    diffuse,
    integrate_reverse,
    perturbation_kernel,
    snr,
    tweedie_denoise,
)
from nudiff.score_models import AnalyticGaussian
from nudiff.sde import sample_prior, simulate_forward, with_noise_scale

FAMILIES = {
    "ve": SdeSpec.ve(0.01, 50.0),
    "vp_linear": SdeSpec.vp_linear(0.1, 20.0),
    "vp_log_snr": SdeSpec.vp_log_snr(1e4, 1e-2),
    "vp_log_snr_frozen": SdeSpec.vp_log_snr(1e4, 1e-2, 0.6),
}


def _moment_oracle(sde, t):
    """(m, s) from quadrature of the linear SDE moment equations, started at eps."""
    eps = sde.epsilon
    t = min(t, sde.stop_time)  # g = f = 0 past the stop time

    def a(u):
        return float(sde.drift_coef(u))

    def g2(u):
        return float(sde.diffusion(u)) ** 2

    log_m = quad(a, eps, t, epsabs=1e-14, epsrel=1e-12)[0]
    m_eps, s_eps = perturbation_kernel(sde, eps)

    def integrand(u):
        return g2(u) * math.exp(-2 * quad(a, eps, u, epsabs=1e-14, epsrel=1e-12)[0])

    var = quad(integrand, eps, t, epsabs=1e-14, epsrel=1e-11, limit=200)[0]
    m = m_eps * math.exp(log_m)
    return m, math.sqrt(math.exp(2 * log_m) * (s_eps ** 2 + var))


class TestKernelClosedForm:
    @pytest.mark.parametrize("name", list(FAMILIES))
    @pytest.mark.parametrize("t", [0.05, 0.3, 0.59, 0.8, 1.0])
    def test_matches_moment_quadrature(self, name, t):
        sde = FAMILIES[name]
        m, s = perturbation_kernel(sde, t)
        m_ref, s_ref = _moment_oracle(sde, t)
        np.testing.assert_allclose([m, s], [m_ref, s_ref], rtol=1e-7)

    def test_ve_exact_kernel_vanishes_at_eps(self):
        sde = SdeSpec.ve(0.01, 50.0)
        m, s = perturbation_kernel(sde, sde.epsilon)
        assert m == 1.0 and s == 0.0
        assert snr(sde, sde.epsilon) == math.inf

    def test_ve_sigma_kernel(self):
        sde = SdeSpec.ve(0.01, 50.0, ve_kernel="sigma")
        _, s = perturbation_kernel(sde, 0.5)
        np.testing.assert_allclose(s, 0.01 * 5000 ** 0.5, rtol=1e-14)

    def test_vp_linear_reference_values(self):
        # m(1) = exp(-(0.1 + 9.95) / 2) for beta in [0.1, 20]
        sde = SdeSpec.vp_linear(0.1, 20.0)
        m, s = perturbation_kernel(sde, 1.0)
        np.testing.assert_allclose(m, math.exp(-5.025), rtol=1e-14)
        np.testing.assert_allclose(m ** 2 + s ** 2, 1.0, rtol=1e-14)

    def test_log_snr_endpoints_and_linearity(self):
        sde = SdeSpec.vp_log_snr(1e4, 1e-2, 0.7)
        np.testing.assert_allclose(snr(sde, sde.epsilon), 1e4, rtol=1e-12)
        np.testing.assert_allclose(snr(sde, 0.7), 1e-2, rtol=1e-12)
        ts = np.linspace(sde.epsilon, 0.7, 9)
        np.testing.assert_allclose(np.diff(sde.log_snr(ts), 2), 0.0, atol=1e-12)

    def test_log_snr_frozen_after_terminal_time(self):
        sde = SdeSpec.vp_log_snr(1e4, 1e-2, 0.6)
        m, s = sde.kernel(np.array([0.6, 0.75, 1.0]))
        assert np.all(m == m[0]) and np.all(s == s[0])
        assert sde.diffusion(0.6) > 0.0
        assert sde.diffusion(0.6000001) == 0.0
        assert sde.stop_time == 0.6

    def test_snr_decreasing(self):
        ts = np.linspace(0.01, 1.0, 50)
        for name in ("ve", "vp_linear", "vp_log_snr"):
            assert np.all(np.diff(FAMILIES[name].log_snr(ts)) < 0), name

    @pytest.mark.parametrize("t", [0.0, -0.1, 1.0001, float("nan")])
    def test_time_outside_domain(self, t):
        with pytest.raises(DomainError):
            perturbation_kernel(FAMILIES["vp_linear"], t)

    @pytest.mark.parametrize("kwargs", [
        {"family": "ve", "sigma_min": 1.0, "sigma_max": 0.5},
        {"family": "vp_linear", "beta_min": 0.0},
        {"family": "vp_log_snr", "snr_min": 10.0, "snr_max": 1.0},
        {"family": "vp_log_snr", "terminal_time": 1e-6},
        {"family": "ve", "epsilon": 0.0},
        {"family": "ve", "noise_scale": 0.0},
    ])
    def test_invalid_parameters(self, kwargs):
        with pytest.raises(ContractError):
            SdeSpec(**kwargs)

    def test_noise_scale_multiplies_std_and_diffusion(self):
        base = SdeSpec.vp_linear()
        scaled = with_noise_scale(base, 0.1)
        np.testing.assert_allclose(scaled.kernel(0.4)[1], 0.1 * base.kernel(0.4)[1], rtol=1e-15)
        np.testing.assert_allclose(scaled.diffusion(0.4), 0.1 * base.diffusion(0.4), rtol=1e-15)
        assert scaled.prior_std == pytest.approx(0.1)


class TestNonUniform:
    def test_blocks_follow_their_specs(self):
        a, b = SdeSpec.vp_linear(), SdeSpec.vp_log_snr(1e4, 1e-2, 0.5)
        nsde = NonUniformSde.from_blocks([(2, a), (3, b)])
        m, s = nsde.kernel(0.8)
        np.testing.assert_array_equal(m[:2], a.kernel(0.8)[0])
        np.testing.assert_array_equal(s[2:], b.kernel(0.8)[1])
        np.testing.assert_array_equal(nsde.active(0.8), [1, 1, 0, 0, 0])

    def test_batched_times_shape(self):
        nsde = NonUniformSde.from_blocks([(1, SdeSpec.ve()), (4, SdeSpec.vp_linear())])
        m, s = nsde.kernel(np.array([0.2, 0.4, 0.9]))
        assert m.shape == s.shape == (3, 5)

    def test_restrict(self):
        nsde = NonUniformSde.from_blocks([(2, SdeSpec.ve()), (3, SdeSpec.vp_linear())])
        assert nsde.restrict(2).dim == 2
        with pytest.raises(ContractError):
            nsde.restrict(3)

    def test_gap_in_ranges_rejected(self):
        with pytest.raises(ContractError):
            NonUniformSde(((slice(0, 2), SdeSpec.ve()), (slice(3, 5), SdeSpec.ve())))

    @settings(max_examples=30, deadline=None)
    @given(sizes=st.lists(st.integers(1, 4), min_size=1, max_size=4),
           t=st.floats(0.01, 1.0))
    def test_uniform_blocks_equal_uniform_sde(self, sizes, t):
        spec = SdeSpec.vp_linear()
        blocks = NonUniformSde.from_blocks([(k, spec) for k in sizes])
        flat = NonUniformSde.uniform(spec, sum(sizes))
        for u, v in zip(blocks.kernel(t), flat.kernel(t)):
            np.testing.assert_array_equal(u, v)


class TestDiffuse:
    def test_noise_reconstructs_state(self):
        rng = np.random.default_rng(0)
        sde = SdeSpec.vp_linear()
        x0 = rng.standard_normal((5, 3))
        xt, z = diffuse(sde, x0, 0.3, rng, return_noise=True)
        m, s = sde.kernel(0.3)
        np.testing.assert_allclose(xt, m * x0 + s * z, rtol=1e-15)

    def test_rejects_non_finite(self):
        with pytest.raises(ContractError):
            diffuse(SdeSpec.ve(), np.array([[np.nan]]), 0.5, np.random.default_rng(0))

    def test_prior_std(self):
        rng = np.random.default_rng(1)
        x = sample_prior(SdeSpec.ve(0.01, 5.0), 200_000, rng, dim=1)
        np.testing.assert_allclose(x.std(), SdeSpec.ve(0.01, 5.0).kernel(1.0)[1], rtol=1e-2)

    def test_forward_simulation_short_horizon(self):
        sde = SdeSpec.vp_linear()
        out = simulate_forward(sde, np.ones((40_000, 1)), [0.2], 1e-3, np.random.default_rng(3))
        m, s = sde.kernel(0.2)
        assert abs(out[0].mean() - m) < 4 * s / 200
        assert abs(out[0].std() - s) < 4 * s / np.sqrt(2 * 40_000)


class TestReverse:
    def test_probability_flow_transports_gaussian(self):
        # the exact-score flow maps quantiles of the diffused law at T onto N(mu, v)
        sde = SdeSpec.vp_linear()
        mean, var = np.array([0.5]), np.array([[0.04]])
        score = AnalyticGaussian(mean, var, sde)
        m, s = sde.kernel(1.0)
        x = np.linspace(-2, 2, 11)[:, None] * math.sqrt(m ** 2 * 0.04 + s ** 2) + m * 0.5
        grid = TimeGrid.linear(1.0, sde.epsilon, 4000, "probability_flow")
        out = integrate_reverse(sde, score, x, grid)
        expect = 0.5 + np.linspace(-2, 2, 11)[:, None] * 0.2
        np.testing.assert_allclose(out, expect, atol=5e-3)

    def test_euler_needs_rng(self):
        sde = SdeSpec.ve()
        with pytest.raises(ContractError):
            integrate_reverse(sde, lambda x, t: -x, np.zeros((2, 1)), TimeGrid.linear(1.0, 0.1, 4))

    def test_non_finite_score_reports_step(self):
        sde = SdeSpec.ve()

        def bad(x, t):
            return np.full_like(x, np.nan) if t < 0.5 else -x

        with pytest.raises(NumericalError) as info:
            integrate_reverse(sde, bad, np.zeros((2, 1)), TimeGrid.linear(1.0, 0.1, 9),
                              np.random.default_rng(0))
        assert info.value.step == 6  # first grid point below 0.5 is 0.4

    def test_grid_validation(self):
        with pytest.raises(ContractError):
            TimeGrid((0.1, 0.5))
        with pytest.raises(ContractError):
            TimeGrid.linear(1.0, 0.1, 0)

    def test_tweedie_is_posterior_mean(self):
        sde = SdeSpec.vp_linear()
        mu, v = 0.3, 0.25
        score = AnalyticGaussian([mu], [[v]], sde)
        m, s = sde.kernel(0.4)
        x = np.array([[-1.0], [0.2], [1.3]])
        post = mu + m * v / (m ** 2 * v + s ** 2) * (x - m * mu)
        np.testing.assert_allclose(tweedie_denoise(sde, score, x, 0.4), post, rtol=1e-12)
