import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sbmamba.bridge import (BridgeSchedule, draw_noise, iterative_sample, marginal_coeffs,
                            noise_scale, one_step_enhance, posterior_step, sample_state, time_grid,
                            ve_sigma2)
from sbmamba.errors import ConfigError, ContractError, DimensionError
from sbmamba.spectral import SpectroBatch
from sbmamba.tensor import Tensor


@pytest.fixture
def sched():
    return BridgeSchedule()


class TestSchedule:
    def test_sigma2_zero(self, sched):
        assert ve_sigma2(sched, 0.0) == 0.0

    def test_sigma2_half_frozen(self, sched, frozen):
        assert abs(ve_sigma2(sched, 0.5) - frozen["ve_half"]) / frozen["ve_half"] < 1e-8

    def test_quadrature_triples_frozen(self, frozen):
        for c, k, t, q in frozen["ve_triples"]:
            assert abs(ve_sigma2(BridgeSchedule(c=c, k=k), t) - q) / q < 1e-8

    def test_sigma2_bar(self, sched):
        assert sched.sigma2_bar(sched.T) == 0.0
        assert sched.sigma2_bar(0.0) == sched.sigma2(sched.T)

    @pytest.mark.parametrize("kw", [dict(kind="vp"), dict(c=0.0), dict(k=1.0), dict(t_eps=0.0), dict(t_eps=1.0)])
    def test_bad_config(self, kw):
        with pytest.raises(ConfigError):
            BridgeSchedule(**kw)

    def test_time_out_of_range(self, sched):
        with pytest.raises(ValueError):
            ve_sigma2(sched, 1.5)
        with pytest.raises(ValueError):
            marginal_coeffs(sched, -0.1)


class TestMarginal:
    def test_boundaries(self, sched):
        m0, m1 = marginal_coeffs(sched, 0.0), marginal_coeffs(sched, sched.T)
        assert (m0.w_x, m0.w_y, m0.sigma_x) == (1.0, 0.0, 0.0)
        assert (m1.w_x, m1.w_y, m1.sigma_x) == (0.0, 1.0, 0.0)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(0.0, 1.0), st.floats(0.05, 2.0), st.floats(1.2, 10.0))
    def test_weights_sum_to_one(self, t, c, k):
        m = marginal_coeffs(BridgeSchedule(c=c, k=k), t)
        assert abs(m.w_x + m.w_y - 1.0) <= 1e-12
        assert m.sigma_x >= 0

    def test_sample_state_boundaries_exact(self, sched, rng, f64):
        x, y, z = (rng.standard_normal((2, 2, 5, 4)) for _ in range(3))
        np.testing.assert_array_equal(sample_state(x, y, 0.0, z, sched), x)
        np.testing.assert_array_equal(sample_state(x, y, sched.T, z, sched), y)

    def test_sample_state_spectro(self, sched, rng, f64):
        x = SpectroBatch(Tensor(rng.standard_normal((1, 2, 5, 3))), n_fft=8, hop=2)
        out = sample_state(x, x, 0.4, x, sched)
        assert isinstance(out, SpectroBatch) and out.n_fft == 8

    def test_shape_mismatch(self, sched):
        with pytest.raises(DimensionError):
            sample_state(np.zeros(3), np.zeros(4), 0.5, np.zeros(3), sched)

    def test_noise_conventions(self, rng):
        assert noise_scale("split") == math.sqrt(0.5) and noise_scale("full") == 1.0
        z = draw_noise(rng, (200_000,), "split", np.float64)
        assert abs(z.var() - 0.5) < 0.01
        with pytest.raises(ConfigError):
            noise_scale("half")


class TestPosteriorStep:
    def test_ode_scalar_example(self, sched):
        # r = sigma^2(s) / sigma^2(t); x_t = 4, x_hat = 0 gives 4 r
        t, s = 1.0, 0.5
        r = ve_sigma2(sched, s) / ve_sigma2(sched, t)
        out = posterior_step(np.array([4.0]), np.array([0.0]), t, s, None, sched, "ode")
        np.testing.assert_allclose(out, [4 * r], rtol=1e-15)

    def test_ode_half_ratio(self, sched):
        # s chosen so sigma^2(s) = sigma^2(T) / 2; x_t = 4, x_hat = 0 lands on 2
        k = sched.k
        s = math.log((k * k + 1) / 2) / (2 * math.log(k))
        out = posterior_step(np.array([4.0]), np.array([0.0]), 1.0, s, None, sched, "ode")
        np.testing.assert_allclose(out, [2.0], rtol=1e-14)

    def test_to_zero_returns_estimate(self, sched, rng):
        xh = rng.standard_normal(7)
        out = posterior_step(rng.standard_normal(7), xh, 0.3, 0.0, rng.standard_normal(7), sched)
        np.testing.assert_array_equal(out, xh)

    def test_fixed_point(self, sched, rng):
        x = rng.standard_normal(5)
        np.testing.assert_allclose(posterior_step(x, x, 0.8, 0.4, None, sched, "ode"), x, rtol=1e-15)

    def test_sde_noise_variance(self, sched, rng, f64):
        t, s = 0.7, 0.3
        z = rng.standard_normal(200_000)
        out = posterior_step(np.zeros_like(z), np.zeros_like(z), t, s, z, sched, "sde")
        r = ve_sigma2(sched, s) / ve_sigma2(sched, t)
        assert abs(out.var() / (ve_sigma2(sched, s) * (1 - r)) - 1) < 0.02

    def test_contracts(self, sched):
        with pytest.raises(ContractError):
            posterior_step(np.zeros(2), np.zeros(2), 0.3, 0.5, None, sched)
        with pytest.raises(ConfigError):
            posterior_step(np.zeros(2), np.zeros(2), 0.5, 0.3, None, sched, "euler")
        with pytest.raises(DimensionError):
            posterior_step(np.zeros(2), np.zeros(3), 0.5, 0.3, None, sched)


class TestSampler:
    def test_grid(self, sched):
        g = time_grid(sched, 4)
        assert g[0] == sched.T and g[-1] == 0.0 and np.all(np.diff(g) < 0)
        with pytest.raises(ContractError):
            time_grid(sched, 0)

    @pytest.mark.parametrize("n", [1, 2, 7])
    @pytest.mark.parametrize("mode", ["sde", "ode"])
    def test_nfe(self, sched, n, mode):
        calls = []

        def model(x, t):
            calls.append(t)
            return x * 0.5

        _, nfe = iterative_sample(np.ones(3), model, n, sched, mode)
        assert nfe == n == len(calls) and calls[0] == sched.T

    def test_identity_model_returns_input(self, sched, rng):
        y = rng.standard_normal(6)
        for mode in ("sde", "ode"):
            out, _ = iterative_sample(y, lambda x, t: y, 10, sched, mode, seed=3)
            np.testing.assert_allclose(out, y, atol=0)

    def test_deterministic_per_seed(self, sched, rng):
        y = rng.standard_normal(6)
        model = lambda x, t: 0.9 * x
        a, _ = iterative_sample(y, model, 5, sched, "sde", seed=11)
        b, _ = iterative_sample(y, model, 5, sched, "sde", seed=11)
        c, _ = iterative_sample(y, model, 5, sched, "sde", seed=12)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_one_step_equals_one_step_sampler(self, sched, rng):
        y = rng.standard_normal(6)
        model = lambda x, t: np.tanh(x) * t
        a = one_step_enhance(y, model, sched)
        for mode in ("sde", "ode"):
            b, _ = iterative_sample(y, model, 1, sched, mode)
            np.testing.assert_array_equal(a, b)


class TestMarginalConsistency:
    def test_exact_estimator_preserves_marginals(self, sched, f64):
        # with x_hat = x (oracle), one sde step from t to s lands on the t=s marginal
        rng = np.random.default_rng(5)
        n = 200_000
        x, y = 0.3, -1.2
        t, s = 0.8, 0.35
        xt = sample_state(np.full(n, x), np.full(n, y), t, rng.standard_normal(n), sched)
        xs = posterior_step(xt, np.full(n, x), t, s, rng.standard_normal(n), sched, "sde")
        m = marginal_coeffs(sched, s)
        assert abs(xs.mean() - (m.w_x * x + m.w_y * y)) < 4 * m.sigma_x / math.sqrt(n)
        assert abs(xs.std() / m.sigma_x - 1) < 0.01

    def test_tensor_inputs(self, sched):
        xt = Tensor(np.array([1.0, 2.0], np.float32))
        out = posterior_step(xt, Tensor(np.zeros(2, np.float32)), 0.6, 0.2, None, sched, "ode")
        assert isinstance(out, Tensor)
        assert out.data.dtype == np.float32
