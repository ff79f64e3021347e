import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from recurvsr.diffusion import (
    build_schedule,
    diffuse_pair,
    forward_diffuse,
    posterior_coefficients,
    posterior_params,
)
from recurvsr.errors import ConfigError, ShapeError


def python_alpha_bars(T, b0, b1):
    """Plain-float schedule, independent of the tensor implementation."""
    betas = [b0 + (b1 - b0) * i / (T - 1) for i in range(T)] if T > 1 else [b0]
    out, prod = [], 1.0
    for b in betas:
        prod *= 1.0 - b
        out.append(prod)
    return betas, out


def chained_moments(t, betas):
    """Mean coefficient and variance after t single-step transitions x <- sqrt(1-b) x + sqrt(b) e."""
    mean_coef, var = 1.0, 0.0
    for b in betas[:t]:
        mean_coef *= math.sqrt(1.0 - b)
        var = (1.0 - b) * var + b
    return mean_coef, var


class TestSchedule:
    def test_default_endpoints(self):
        s = build_schedule(1000, 0.0001, 0.02)
        assert s.beta[0].item() == 0.0001
        assert s.beta[-1].item() == 0.02
        assert s.beta_at(1) == 0.0001 and s.beta_at(1000) == 0.02

    def test_single_step(self):
        s = build_schedule(1, 0.5, 0.5)
        assert s.beta.tolist() == [0.5]
        assert s.alpha_bar.tolist() == [0.5]

    def test_terminal_alpha_bar_matches_running_product(self):
        _, ab = python_alpha_bars(1000, 1e-4, 0.02)
        # frozen from the running product: 4.035e-05
        assert ab[-1] < 0.01
        s = build_schedule(1000, 1e-4, 0.02)
        assert s.alpha_bar[-1].item() == pytest.approx(ab[-1], rel=1e-12)
        assert s.alpha_bar[-1].item() < 0.01

    def test_recurrence(self):
        s = build_schedule(1000, 1e-4, 0.02)
        ab, a = s.alpha_bar.numpy(), s.alpha.numpy()
        assert ab[0] == a[0]
        np.testing.assert_allclose(ab[1:] / ab[:-1], a[1:], rtol=1e-12, atol=0)
        assert np.all(np.diff(ab) < 0)
        assert np.all(np.diff(s.beta.numpy()) >= 0)
        assert np.all((s.beta.numpy() > 0) & (s.beta.numpy() < 1))

    @pytest.mark.parametrize(
        "args,field",
        [
            ((0, 1e-4, 0.02), "total_steps"),
            ((10, 0.0, 0.02), "beta_start"),
            ((10, 1e-4, 1.0), "beta_end"),
            ((10, 0.02, 1e-4), "beta_start"),
            ((2.5, 1e-4, 0.02), "total_steps"),
        ],
    )
    def test_invalid_configuration_names_field(self, args, field):
        with pytest.raises(ConfigError, match=field):
            build_schedule(*args)

    def test_roundtrip_through_dict(self):
        s = build_schedule(37, 3e-4, 0.05)
        s2 = type(s).from_dict(s.to_dict())
        assert torch.equal(s.beta, s2.beta) and torch.equal(s.alpha_bar, s2.alpha_bar)


class TestForwardDiffuse:
    def setup_method(self):
        self.s = build_schedule(10, 1e-4, 0.2)
        g = torch.Generator().manual_seed(0)
        self.x0 = torch.rand(3, 8, 8, generator=g, dtype=torch.float64) * 2 - 1
        self.noise = torch.randn(3, 8, 8, generator=g, dtype=torch.float64)

    def test_zero_noise(self):
        for t in range(1, 11):
            out = forward_diffuse(self.x0, t, torch.zeros_like(self.x0), self.s)
            assert torch.equal(out, math.sqrt(self.s.alpha_bar_at(t)) * self.x0)

    def test_zero_signal(self):
        for t in range(1, 11):
            out = forward_diffuse(torch.zeros_like(self.x0), t, self.noise, self.s)
            assert torch.equal(out, math.sqrt(1 - self.s.alpha_bar_at(t)) * self.noise)

    @pytest.mark.parametrize("T", [1, 2, 5, 10])
    def test_matches_chained_transitions_analytically(self, T):
        s = build_schedule(T, 1e-3, 0.3)
        betas = s.beta.tolist()
        x0 = torch.tensor([1.0], dtype=torch.float64)
        for t in range(1, T + 1):
            mean_coef, var = chained_moments(t, betas)
            mean = forward_diffuse(x0, t, torch.zeros_like(x0), s).item()
            std = forward_diffuse(torch.zeros_like(x0), t, torch.ones_like(x0), s).item()
            assert mean == pytest.approx(mean_coef, rel=1e-12, abs=1e-12)
            assert std**2 == pytest.approx(var, rel=1e-12, abs=1e-12)

    def test_variance_matches_chain_monte_carlo(self):
        n, t = 10_000, 3
        s = build_schedule(10, 0.05, 0.3)
        g = torch.Generator().manual_seed(1)
        x0a = torch.randn(n, dtype=torch.float64, generator=g)
        closed = forward_diffuse(x0a, t, torch.randn(n, dtype=torch.float64, generator=g), s)
        x = torch.randn(n, dtype=torch.float64, generator=g)
        for b in s.beta[:t].tolist():
            x = math.sqrt(1 - b) * x + math.sqrt(b) * torch.randn(n, dtype=torch.float64, generator=g)
        v1, v2 = closed.var().item(), x.var().item()
        se = math.sqrt(2.0 / (n - 1))  # std error of a unit-variance sample variance
        assert abs(v1 - v2) < 3 * math.sqrt(2) * se

    def test_per_sample_timesteps(self):
        x0 = self.x0.expand(4, -1, -1, -1)
        noise = self.noise.expand(4, -1, -1, -1)
        ts = torch.tensor([1, 4, 7, 10])
        batched = forward_diffuse(x0, ts, noise, self.s)
        for i, t in enumerate(ts.tolist()):
            torch.testing.assert_close(batched[i], forward_diffuse(self.x0, t, self.noise, self.s), rtol=0, atol=0)

    def test_errors(self):
        with pytest.raises(IndexError):
            forward_diffuse(self.x0, 0, self.noise, self.s)
        with pytest.raises(IndexError):
            forward_diffuse(self.x0, 11, self.noise, self.s)
        with pytest.raises(ShapeError):
            forward_diffuse(self.x0, 1, self.noise[:, :4], self.s)

    @settings(max_examples=50, deadline=None)
    @given(a=st.floats(-8, 8, allow_nan=False), t=st.integers(1, 10), seed=st.integers(0, 2**16))
    def test_linear_in_signal_and_noise(self, a, t, seed):
        g = torch.Generator().manual_seed(seed)
        x0 = torch.randn(5, dtype=torch.float64, generator=g)
        eps = torch.randn(5, dtype=torch.float64, generator=g)
        lhs = forward_diffuse(a * x0, t, a * eps, self.s)
        rhs = a * forward_diffuse(x0, t, eps, self.s)
        torch.testing.assert_close(lhs, rhs, rtol=1e-14, atol=1e-14)


class TestDiffusePair:
    def setup_method(self):
        self.s = build_schedule(10, 1e-4, 0.2)
        g = torch.Generator().manual_seed(2)
        self.x0 = torch.randn(3, 4, 4, generator=g, dtype=torch.float64)
        self.noise = torch.randn(3, 4, 4, generator=g, dtype=torch.float64)

    def test_t1_previous_is_clean(self):
        x_t, x_prev = diffuse_pair(self.x0, 1, self.noise, self.s)
        assert torch.equal(x_prev, self.x0)
        assert torch.equal(x_t, forward_diffuse(self.x0, 1, self.noise, self.s))

    def test_zero_noise(self):
        for t in range(2, 11):
            x_t, x_prev = diffuse_pair(self.x0, t, torch.zeros_like(self.x0), self.s)
            torch.testing.assert_close(x_t, math.sqrt(self.s.alpha_bar_at(t)) * self.x0, rtol=0, atol=0)
            torch.testing.assert_close(x_prev, math.sqrt(self.s.alpha_bar_at(t - 1)) * self.x0, rtol=0, atol=0)

    def test_shared_noise(self):
        t = 6
        x_t, x_prev = diffuse_pair(self.x0, t, self.noise, self.s)
        torch.testing.assert_close(x_t, forward_diffuse(self.x0, t, self.noise, self.s), rtol=0, atol=0)
        torch.testing.assert_close(x_prev, forward_diffuse(self.x0, t - 1, self.noise, self.s), rtol=0, atol=0)

    def test_corruption_is_monotone_on_average(self):
        g = torch.Generator().manual_seed(3)
        d_t, d_prev = [], []
        for _ in range(1000):
            eps = torch.randn(self.x0.shape, dtype=torch.float64, generator=g)
            x_t, x_prev = diffuse_pair(self.x0, 5, eps, self.s)
            d_t.append((x_t - self.x0).norm().item())
            d_prev.append((x_prev - self.x0).norm().item())
        assert np.mean(d_t) >= np.mean(d_prev)


def bayes_posterior_conjugate(x0, xt, t, s):
    """Multiply q(x_t | x_{t-1}) by q(x_{t-1} | x_0) as Gaussians in x_{t-1} (precision form)."""
    ab_prev = s.alpha_bar_at(t - 1)
    a, b = s.alpha_at(t), s.beta_at(t)
    prec = 1.0 / (1.0 - ab_prev) + a / b
    mean = (math.sqrt(ab_prev) * x0 / (1.0 - ab_prev) + math.sqrt(a) * xt / b) / prec
    return mean, 1.0 / prec


def bayes_posterior_quadrature(x0, xt, t, s):
    ab_prev = s.alpha_bar_at(t - 1)
    a, b = s.alpha_at(t), s.beta_at(t)

    def log_joint(x):
        return -((xt - math.sqrt(a) * x) ** 2) / (2 * b) - ((x - math.sqrt(ab_prev) * x0) ** 2) / (2 * (1 - ab_prev))

    # the conjugate result only places the integration window
    center, var = bayes_posterior_conjugate(x0, xt, t, s)
    offset = log_joint(center)
    f = lambda x, k: x**k * math.exp(log_joint(x) - offset)
    lo, hi = center - 15 * math.sqrt(var), center + 15 * math.sqrt(var)
    z = integrate.quad(f, lo, hi, args=(0,), epsabs=0, epsrel=1e-13, limit=200)[0]
    m1 = integrate.quad(f, lo, hi, args=(1,), epsabs=0, epsrel=1e-13, limit=200)[0] / z
    m2 = integrate.quad(f, lo, hi, args=(2,), epsabs=0, epsrel=1e-13, limit=200)[0] / z
    return m1, m2 - m1**2


class TestPosterior:
    def test_t1_collapses_to_clean(self):
        s = build_schedule(10, 1e-4, 0.2)
        x0 = torch.randn(3, 4, 4, dtype=torch.float64)
        mean, var = posterior_params(x0, x0.clone(), 1, s)
        torch.testing.assert_close(mean, x0, rtol=1e-12, atol=1e-12)
        assert var == 0.0

    def test_affine_identity(self):
        # posterior mean averaged over x_t ~ q(x_t | x_0) must give E[x_{t-1} | x_0]
        s = build_schedule(10, 1e-4, 0.2)
        for t in range(1, 11):
            c0, ct, _ = posterior_coefficients(t, s)
            assert c0 + ct * math.sqrt(s.alpha_bar_at(t)) == pytest.approx(math.sqrt(s.alpha_bar_at(t - 1)), rel=1e-12)
        c0, ct, _ = posterior_coefficients(1, s)
        assert c0 + ct == pytest.approx(1.0, rel=1e-12)

    def test_matches_bayes_oracle(self):
        s = build_schedule(10, 1e-4, 0.2)
        g = torch.Generator().manual_seed(5)
        for _ in range(20):
            x0 = torch.randn(1, 1, 1, dtype=torch.float64, generator=g)
            xt = forward_diffuse(x0, 5, torch.randn(1, 1, 1, dtype=torch.float64, generator=g), s)
            mean, var = posterior_params(x0, xt, 5, s)
            m_ref, v_ref = bayes_posterior_conjugate(x0.item(), xt.item(), 5, s)
            assert mean.item() == pytest.approx(m_ref, abs=1e-10)
            assert var == pytest.approx(v_ref, abs=1e-10)
            m_q, v_q = bayes_posterior_quadrature(x0.item(), xt.item(), 5, s)
            assert mean.item() == pytest.approx(m_q, abs=1e-9)
            assert var == pytest.approx(v_q, abs=1e-9)

    def test_variance_bounded_by_beta(self):
        s = build_schedule(1000, 1e-4, 0.02)
        for t in range(1, 1001):
            _, _, var = posterior_coefficients(t, s)
            assert 0.0 <= var <= s.beta_at(t)

    def test_errors(self):
        s = build_schedule(10, 1e-4, 0.2)
        x = torch.zeros(3, 2, 2)
        with pytest.raises(IndexError):
            posterior_params(x, x, 0, s)
        with pytest.raises(ShapeError):
            posterior_params(x, x[:, :1], 1, s)
