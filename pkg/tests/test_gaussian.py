"""Diagonal-Gaussian algebra: closed forms, sampling, and densities."""

import math

import numpy as np
import pytest

from cvaeseg.errors import DimMismatch
from cvaeseg.gaussian import DiagGaussian, kl_diag, kl_to_standard, log_pdf, reparam_sample
from cvaeseg.oracle import check_gradients, mc_kl
from cvaeseg.tensor import ParamRegistry, Tensor, backward, reduce_sum, square


def gauss(mu, log_var, grad=False):
    return DiagGaussian(Tensor(np.asarray(mu, dtype=float), requires_grad=grad),
                        Tensor(np.asarray(log_var, dtype=float), requires_grad=grad))


class TestKlDiag:
    def test_self_divergence_zero(self):
        gen = np.random.Generator(np.random.PCG64(0))
        for _ in range(10):
            mu = gen.normal(size=4)
            lv = gen.normal(size=4)
            assert kl_diag(gauss(mu, lv), gauss(mu, lv)).item() == pytest.approx(0.0, abs=1e-12)

    def test_hand_case_half(self):
        q = gauss([1.0], [0.0])
        p = gauss([0.0], [0.0])
        assert abs(kl_diag(q, p).item() - 0.5) <= 1e-12

    def test_monte_carlo_agreement(self):
        gen = np.random.Generator(np.random.PCG64(42))
        for k in range(5):
            d = int(gen.integers(1, 4))
            q = gauss(gen.normal(size=d), gen.normal(scale=0.5, size=d))
            p = gauss(gen.normal(size=d), gen.normal(scale=0.5, size=d))
            est, se = mc_kl(q, p, 200_000, seed=100 + k)
            assert abs(est - kl_diag(q, p).item()) <= 3.0 * se

    def test_nonnegative_on_random_pairs(self):
        gen = np.random.Generator(np.random.PCG64(17))
        for _ in range(50):
            q = gauss(gen.normal(size=3), gen.normal(size=3))
            p = gauss(gen.normal(size=3), gen.normal(size=3))
            assert kl_diag(q, p).item() >= -1e-12

    def test_zero_iff_equal(self):
        gen = np.random.Generator(np.random.PCG64(18))
        q = gauss(gen.normal(size=3), gen.normal(size=3))
        p = gauss(q.mu.data + 1e-3, q.log_var.data)
        assert kl_diag(q, p).item() > 1e-8

    def test_asymmetry_witness(self):
        q = gauss([0.0], [0.0])
        p = gauss([1.0], [1.5])
        assert kl_diag(q, p).item() != pytest.approx(kl_diag(p, q).item(), rel=1e-3)

    def test_dim_mismatch(self):
        with pytest.raises(DimMismatch):
            kl_diag(gauss([0.0], [0.0]), gauss([0.0, 0.0], [0.0, 0.0]))

    def test_batched_rows_match_single(self):
        gen = np.random.Generator(np.random.PCG64(19))
        mu_q, lv_q = gen.normal(size=(3, 2)), gen.normal(size=(3, 2))
        mu_p, lv_p = gen.normal(size=(3, 2)), gen.normal(size=(3, 2))
        batched = kl_diag(gauss(mu_q, lv_q), gauss(mu_p, lv_p))
        for i in range(3):
            single = kl_diag(gauss(mu_q[i], lv_q[i]), gauss(mu_p[i], lv_p[i]))
            assert batched.data[i] == pytest.approx(single.item(), rel=1e-15)

    def test_gradients_match_finite_differences(self):
        gen = np.random.Generator(np.random.PCG64(20))
        q = gauss(gen.normal(size=3), gen.normal(size=3), grad=True)
        p = gauss(gen.normal(size=3), gen.normal(size=3), grad=True)
        reg = ParamRegistry()
        for name, t in (("mq", q.mu), ("lq", q.log_var), ("mp", p.mu), ("lp", p.log_var)):
            reg.add(name, t)
        assert check_gradients(lambda: kl_diag(q, p), reg) <= 1e-4


class TestKlToStandard:
    def test_standard_is_zero(self):
        assert kl_to_standard(gauss([0.0, 0.0], [0.0, 0.0])).item() == 0.0

    def test_bit_identical_to_explicit_standard(self):
        gen = np.random.Generator(np.random.PCG64(21))
        for _ in range(50):
            d = int(gen.integers(1, 6))
            q = gauss(gen.normal(size=d), gen.normal(size=d))
            std = gauss(np.zeros(d), np.zeros(d))
            assert kl_to_standard(q).item() == kl_diag(q, std).item()

    def test_unit_mean_log_variance_one(self):
        # KL(N(0, e) || N(0, 1)) = (e - 2) / 2
        q = gauss([0.0], [1.0])
        expected = (math.e - 2.0) / 2.0
        assert kl_to_standard(q).item() == pytest.approx(expected, rel=1e-12)
        est, se = mc_kl(q, gauss([0.0], [0.0]), 200_000, seed=7)
        assert abs(est - expected) <= 3.0 * se


class TestReparamSample:
    def test_zero_noise_returns_mean(self):
        q = gauss([1.0, -2.0], [0.3, -0.7])
        np.testing.assert_array_equal(reparam_sample(q, np.zeros(2)).data, q.mu.data)

    def test_unit_variance_adds_noise(self):
        q = gauss([1.0, 2.0], [0.0, 0.0])
        eps = np.array([0.5, -1.5])
        np.testing.assert_allclose(reparam_sample(q, eps).data, q.mu.data + eps, rtol=1e-15)

    def test_sampling_moments(self):
        q = gauss([0.7], [0.4])
        gen = np.random.Generator(np.random.PCG64(3))
        n = 100_000
        z = q.mu.data + np.exp(0.5 * q.log_var.data) * gen.standard_normal((n, 1))
        se_mean = z.std() / math.sqrt(n)
        assert abs(z.mean() - 0.7) <= 3.0 * se_mean
        var = np.exp(0.4)
        se_var = z.var() * math.sqrt(2.0 / (n - 1))
        assert abs(z.var() - var) <= 3.0 * se_var

    def test_dim_mismatch(self):
        with pytest.raises(DimMismatch):
            reparam_sample(gauss([0.0], [0.0]), np.zeros(2))

    def test_gradient_paths(self):
        gen = np.random.Generator(np.random.PCG64(4))
        q = gauss(gen.normal(size=2), gen.normal(size=2), grad=True)
        eps = gen.standard_normal(2)
        reg = ParamRegistry()
        reg.add("mu", q.mu)
        reg.add("lv", q.log_var)
        err = check_gradients(lambda: reduce_sum(square(reparam_sample(q, eps))), reg)
        assert err <= 1e-4
        # d f(z) / d mu at f = sum(z^2) is 2 z
        from cvaeseg.tensor import zero_grad
        zero_grad(reg)
        z = reparam_sample(q, eps)
        backward(reduce_sum(square(z)))
        np.testing.assert_allclose(q.mu.grad, 2.0 * z.data, rtol=1e-12)
        np.testing.assert_allclose(
            q.log_var.grad, 2.0 * z.data * 0.5 * np.exp(0.5 * q.log_var.data) * eps, rtol=1e-12)


class TestLogPdf:
    def test_standard_normal_at_origin(self):
        q = gauss([0.0], [0.0])
        assert log_pdf(q, np.zeros(1)).item() == pytest.approx(-0.5 * math.log(2 * math.pi), rel=1e-15)

    def test_maximized_at_mean(self):
        q = gauss([0.4], [-0.3])
        at_mode = log_pdf(q, np.array([0.4])).item()
        for z in np.linspace(-3, 3, 61):
            assert log_pdf(q, np.array([z])).item() <= at_mode + 1e-12

    def test_density_integrates_to_one(self):
        q = gauss([0.3], [0.2])
        grid = np.linspace(-12.0, 12.0, 20_001)
        dens = np.array([math.exp(log_pdf(q, np.array([z])).item()) for z in grid])
        integral = np.trapezoid(dens, grid)
        assert abs(integral - 1.0) <= 1e-6

    def test_dim_mismatch(self):
        with pytest.raises(DimMismatch):
            log_pdf(gauss([0.0, 1.0], [0.0, 0.0]), np.zeros(3))
