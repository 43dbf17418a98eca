import numpy as np
import pytest

from nudiff.errors import ContractError
from nudiff.multiscale import (
    build_schedule,
    cost_profile,
    gaussian_scale_models,
    make_multiscale,
    multiscale_dsm_loss,
    multiscale_sample,
    scale_mlps,
    train_multiscale,
    uniform_sample,
)
from nudiff.score_models import AnalyticGaussian, TrainConfig
from nudiff.sde import NonUniformSde, SdeSpec
from nudiff.synthdata import GaussianImages
from nudiff.wavelet import haar_matrix


class TestSchedule:
    def test_terminal_times(self):
        sched = build_schedule(3)
        assert sched.group_names == ("a_3", "d_3", "d_2", "d_1")
        np.testing.assert_allclose(sched.terminal_times, [1.0, 0.75, 0.5, 0.25])

    def test_ranges_tile_the_horizon(self):
        sched = build_schedule(2, epsilon=1e-3)
        assert sched.ranges == [(1e-3, 1 / 3), (1 / 3, 2 / 3), (2 / 3, 1.0)]

    def test_scale_groups_and_activity(self):
        sched = build_schedule(2)
        assert sched.scale_groups(1) == ("a_2", "d_2", "d_1")
        assert sched.scale_groups(3) == ("a_2",)
        # stop time is inclusive
        assert sched.active_groups(1 / 3) == ("a_2", "d_2", "d_1")
        assert sched.active_groups(0.5) == ("a_2", "d_2")

    def test_invalid(self):
        with pytest.raises(ContractError):
            build_schedule(-1)
        with pytest.raises(ContractError):
            build_schedule(3, epsilon=0.3)
        with pytest.raises(ContractError):
            build_schedule(1).range(3)


class TestGroupSdes:
    def test_each_group_hits_snr_min_at_its_stop_time(self):
        model = make_multiscale((8, 8), 2, 1e4, 1e-2)
        for (sl, spec), T in zip(model.sde.components, model.schedule.terminal_times):
            np.testing.assert_allclose(spec.snr(T), 1e-2, rtol=1e-12)
            np.testing.assert_allclose(spec.snr(spec.epsilon), 1e4, rtol=1e-12)

    def test_scale_dims(self):
        model = make_multiscale((8, 8), 2, 1e4, 1e-2)
        assert [model.scale_dim(i) for i in (1, 2, 3)] == [64, 16, 4]
        assert model.scale_sde(2).dim == 16

    def test_model_dimension_check(self):
        with pytest.raises(ContractError):
            make_multiscale((8, 8), 1, 1e4, 1e-2,
                            scale_models=[AnalyticGaussian(np.zeros(4), np.eye(4), SdeSpec.vp_linear())] * 2)


class TestCost:
    @pytest.mark.parametrize("n", [1, 2, 3])
    def test_ratio_formula(self, n):
        # uniform: (n+1) ranges of N inputs; cascade: prefix sizes 4^{-k} N
        model = make_multiscale((8, 8), n, 1e4, 1e-2)
        prof = cost_profile(model, 10)
        dims = [64] + [64 // 4 ** k for k in range(1, n + 1)]
        assert prof.ratio == pytest.approx((n + 1) * 64 / sum(dims))

    def test_ratio_grows_with_levels(self):
        ratios = [cost_profile(make_multiscale((8, 8), n, 1e4, 1e-2), 32).ratio for n in (0, 1, 2, 3)]
        assert ratios[0] == 1.0
        assert all(b > a for a, b in zip(ratios, ratios[1:]))

    def test_per_range_steps(self):
        model = make_multiscale((8, 8), 1, 1e4, 1e-2)
        rows = cost_profile(model, [5, 7]).rows()
        assert [r["elements"] for r in rows] == [320, 112, 432]

    def test_bad_steps(self):
        with pytest.raises(ContractError):
            cost_profile(make_multiscale((8, 8), 1, 1e4, 1e-2), [5])


class TestSampling:
    def test_zero_levels_is_the_uniform_sampler(self):
        data = GaussianImages(size=4)
        model = make_multiscale((4, 4), 0, 1e4, 1e-2)
        model.scale_models = gaussian_scale_models(model, data.mean, data.cov)
        a = multiscale_sample(model, 20, np.random.default_rng(5), 7)
        b = uniform_sample(model.scale_models[0], model.sde, model.layout, 20, np.random.default_rng(5), 7)
        np.testing.assert_array_equal(a, b)

    def test_analytic_cascade_recovers_image_law(self):
        data = GaussianImages(size=4)
        model = make_multiscale((4, 4), 1, 1e5, 1e-3)
        model.scale_models = gaussian_scale_models(model, data.mean, data.cov)
        n = 20_000
        x = multiscale_sample(model, 200, np.random.default_rng(0), n).reshape(n, -1)
        se = np.sqrt(np.diag(data.cov) / n)
        assert np.all(np.abs(x.mean(0) - data.mean) < 5 * se + 5e-3)
        np.testing.assert_allclose(np.cov(x.T), data.cov, atol=0.03)

    def test_scale_model_marginals(self):
        data = GaussianImages(size=4)
        model = make_multiscale((4, 4), 1, 1e4, 1e-2)
        models = gaussian_scale_models(model, data.mean, data.cov)
        H = haar_matrix(model.layout)
        np.testing.assert_allclose(models[1].mean, (H @ data.mean)[:4], atol=1e-13)
        np.testing.assert_allclose(models[0].cov, H @ data.cov @ H.T, atol=1e-13)

    def test_missing_model(self):
        model = make_multiscale((4, 4), 1, 1e4, 1e-2)
        with pytest.raises(ContractError):
            multiscale_sample(model, 4, np.random.default_rng(0))


class TestTraining:
    def test_loss_uses_prefix_and_decreases(self):
        data = GaussianImages(size=4)
        model = make_multiscale((4, 4), 1, 1e4, 1e-2)
        model.scale_models = scale_mlps(model, 2.0, depth=2, rng=np.random.default_rng(0))
        rng = np.random.default_rng(1)
        before = np.mean([multiscale_dsm_loss(model, 2, data.sample(256, rng), rng, need_grad=False)[0]
                          for _ in range(10)])
        cfg = TrainConfig(lr=2e-3, iterations=300, batch_size=64, seed=3)
        results = train_multiscale(model, data, cfg)
        assert len(results) == 2
        after = np.mean([multiscale_dsm_loss(model, 2, data.sample(256, rng), rng, need_grad=False)[0]
                         for _ in range(10)])
        assert after < before

    def test_uniform_baseline_sde(self):
        nsde = NonUniformSde.uniform(SdeSpec.vp_log_snr(1e4, 1e-2), 16)
        assert nsde.prior_std().tolist() == [1.0] * 16
