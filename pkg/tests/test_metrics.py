import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.optimize import linprog
from scipy.stats import norm

from nudiff.errors import ContractError
from nudiff.metrics import (
    EvalReport,
    consistency_psnr,
    diversity,
    gaussian_kl,
    kl_bound_check,
    mean_diversity,
    model_terminal_law,
    psnr,
    sliced_wasserstein,
    wasserstein2_1d,
)
from nudiff.score_models import AnalyticGaussian, PerturbedScore
from nudiff.sde import SdeSpec, TimeGrid, integrate_reverse
from nudiff.synthdata import Downsample


def _w2_by_lp(a, b):
    """Squared-cost optimal transport between uniform empirical measures, solved as an LP."""
    n, m = len(a), len(b)
    cost = (np.asarray(a)[:, None] - np.asarray(b)[None, :]) ** 2
    rows = np.kron(np.eye(n), np.ones(m))
    cols = np.kron(np.ones(n), np.eye(m))
    res = linprog(cost.ravel(), A_eq=np.vstack([rows, cols]),
                  b_eq=np.concatenate([np.full(n, 1 / n), np.full(m, 1 / m)]), bounds=(0, None),
                  method="highs")
    return math.sqrt(res.fun)


class TestImageMetrics:
    def test_psnr_values(self):
        a = np.zeros((4, 4))
        assert psnr(a, a + 0.1) == pytest.approx(20.0)
        assert psnr(a, a) == math.inf
        assert psnr(a, a + 2.0, peak=2.0) == pytest.approx(0.0)
        with pytest.raises(ContractError):
            psnr(a, np.zeros(3))

    def test_consistency_psnr(self):
        x = np.full((4, 4), 0.5)
        assert consistency_psnr(Downsample(2), x, np.full((2, 2), 0.4)) == pytest.approx(20.0)

    def test_diversity(self):
        recon = np.stack([np.zeros((2, 2)), np.ones((2, 2))])
        assert diversity(recon) == pytest.approx(0.5)
        assert mean_diversity(np.stack([recon, recon * 0])) == pytest.approx(0.25)
        with pytest.raises(ContractError):
            diversity(np.zeros((1, 2, 2)))

    def test_report_json(self):
        payload = json.loads(EvalReport(psnr=math.inf, swd=0.5).to_json())
        assert payload["psnr"] == "inf" and payload["swd"] == 0.5 and payload["diversity"] is None


class TestWasserstein:
    @settings(max_examples=25, deadline=None)
    @given(a=st.lists(st.floats(-5, 5), min_size=1, max_size=6),
           b=st.lists(st.floats(-5, 5), min_size=1, max_size=7))
    def test_matches_linear_program(self, a, b):
        assert wasserstein2_1d(a, b) == pytest.approx(_w2_by_lp(a, b), rel=1e-6, abs=1e-6)

    def test_hand_value(self):
        assert wasserstein2_1d([0.0], [0.0, 1.0]) == pytest.approx(math.sqrt(0.5))

    def test_sliced_shift(self):
        # shifting by c gives mean |c . theta| = 2|c|/pi over uniform directions in 2D
        rng = np.random.default_rng(0)
        a = rng.standard_normal((500, 2))
        c = np.array([0.6, -0.8])
        got = sliced_wasserstein(a, a + c, 4000, np.random.default_rng(1))
        assert got == pytest.approx(2 / math.pi, rel=2e-2)

    def test_sliced_symmetric_and_zero(self):
        a = np.random.default_rng(2).standard_normal((50, 3))
        b = np.random.default_rng(3).standard_normal((40, 3))
        assert sliced_wasserstein(a, a, 10, np.random.default_rng(0)) == 0.0
        np.testing.assert_allclose(sliced_wasserstein(a, b, 10, np.random.default_rng(0)),
                                   sliced_wasserstein(b, a, 10, np.random.default_rng(0)), rtol=1e-12)

    def test_sliced_errors(self):
        with pytest.raises(ContractError):
            sliced_wasserstein(np.zeros((5, 2)), np.zeros((5, 3)), 3, np.random.default_rng(0))
        with pytest.raises(ContractError):
            sliced_wasserstein(np.zeros((1, 2)), np.zeros((5, 2)), 3, np.random.default_rng(0))


class TestKl:
    def test_gaussian_kl_by_quadrature(self):
        p, q = norm(0.3, 0.7), norm(-0.2, 1.3)
        ref = quad(lambda x: p.pdf(x) * (p.logpdf(x) - q.logpdf(x)), -12, 12)[0]
        assert gaussian_kl(0.3, 0.49, -0.2, 1.69) == pytest.approx(ref, rel=1e-9)

    @pytest.mark.parametrize("slope,shift", [(0.0, 0.0), (0.1, -0.1), (-0.2, 0.2)])
    def test_terminal_law_matches_simulation(self, slope, shift):
        sde = SdeSpec.vp_linear()
        model = PerturbedScore(AnalyticGaussian([0.5], [[0.64]], sde), slope, shift)
        mean, var = model_terminal_law(model, sde, 1.0)
        rng = np.random.default_rng(0)
        x = integrate_reverse(sde, model, rng.standard_normal((40_000, 1)),
                              TimeGrid.linear(1.0, sde.epsilon, 1000), rng)
        assert abs(x.mean() - mean) < 4 * math.sqrt(var / 4e4) + 5e-3
        assert x.var() == pytest.approx(var, rel=3e-2)

    def test_exact_model_bound_is_prior_term(self):
        sde = SdeSpec.vp_linear()
        model = PerturbedScore(AnalyticGaussian([0.5], [[0.64]], sde))
        res = kl_bound_check((0.5, 0.64), model, sde, 1000, np.random.default_rng(0))
        assert res.score_matching == 0.0
        assert 0.0 <= res.lhs <= res.prior_kl
        assert res.holds

    @pytest.mark.parametrize("sde", [SdeSpec.ve(0.01, 5.0), SdeSpec.vp_log_snr(1e4, 1e-2)])
    @pytest.mark.parametrize("delta", [-0.2, 0.1])
    def test_bound_holds_for_misspecified_scores(self, sde, delta):
        model = PerturbedScore(AnalyticGaussian([0.5], [[0.64]], sde), delta, delta)
        res = kl_bound_check((0.5, 0.64), model, sde, 100_000, np.random.default_rng(1))
        assert res.lhs > 0
        assert res.lhs <= res.rhs + 1e-3

    def test_needs_affine_model(self):
        with pytest.raises(ContractError):
            kl_bound_check((0.0, 1.0), lambda x, t: -x, SdeSpec.vp_linear(), 10, np.random.default_rng(0))
