import math

import numpy as np
import pytest
from scipy import integrate, stats

from apportion.model import (Hyperparams, ModelState, Quadratics, WindowData, log_target_nu,
                             mh_update_nu, mh_update_r, sigma2_posterior, slab_log_odds, tau2_posterior,
                             theta_posterior, truncated_normal_draw, update_beta_z, update_sigma2,
                             update_tau2, update_theta)

from oracles import inclusion_probability, normalize_on_grid, normalize_quad, wasserstein_to_density

SETTINGS = [0, 1, 2, 3]


def _state(p=2, beta=None, z=None, sigma2=1.0, nu=5.0, r=0.0):
    beta = np.zeros(p) if beta is None else np.asarray(beta, float)
    z = (beta > 0).astype(np.int8) if z is None else np.asarray(z, np.int8)
    return ModelState(beta, z, np.full(p, 0.5), np.ones(p), sigma2, nu, r)


class TestThetaConditional:
    @pytest.mark.parametrize("seed", SETTINGS)
    def test_matches_numerical_normalization(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.uniform(0.5, 4.0, 2)
        z = int(rng.integers(0, 2))
        grid = np.linspace(1e-3, 1 - 1e-3, 2001)
        dens = normalize_quad(lambda t: t ** z * (1 - t) ** (1 - z) * t ** (a - 1) * (1 - t) ** (b - 1), 0.0, 1.0)
        closed = stats.beta(*theta_posterior(z, a, b)).pdf(grid)
        assert np.max(np.abs(dens(grid) - closed)) < 1e-6

    def test_uniform_prior_cases(self):
        assert theta_posterior(1, 1.0, 1.0) == (2.0, 1.0)
        assert theta_posterior(0, 1.0, 1.0) == (1.0, 2.0)

    def test_draws_follow_closed_form(self):
        rng = np.random.default_rng(5)
        h = Hyperparams(a=2.0, b=3.0)
        draws = [update_theta(0, 1, h, rng) for _ in range(4000)]
        assert stats.kstest(draws, stats.beta(3.0, 3.0).cdf).pvalue > 0.01

    def test_large_a_pushes_theta_to_one(self):
        rng = np.random.default_rng(6)
        h = Hyperparams(a=1e6, b=1.0)
        assert min(update_theta(0, 0, h, rng) for _ in range(200)) > 0.999


class TestTau2Conditional:
    @pytest.mark.parametrize("seed", SETTINGS)
    def test_matches_numerical_normalization(self, seed):
        rng = np.random.default_rng(seed)
        c, d = rng.uniform(0.5, 3.0, 2)
        z = int(rng.integers(0, 2))
        beta = float(rng.uniform(0.1, 5.0)) if z else 0.0
        shape, scale = tau2_posterior(z, beta, c, d)
        dist = stats.invgamma(shape, scale=scale)

        def f(t):
            slab = np.exp(-beta / t) / t if z else 1.0
            return slab * t ** (-(c + 1)) * np.exp(-d / t)

        dens = normalize_quad(f, 0.0, np.inf, None)
        grid = np.linspace(dist.ppf(1e-6), dist.ppf(1 - 1e-6), 2001)
        assert np.max(np.abs(dens(grid) - dist.pdf(grid))) < 1e-6

    def test_no_data_term_when_excluded(self):
        assert tau2_posterior(0, 0.0, 1.0, 1.0) == (1.0, 1.0)

    def test_example_values(self):
        assert tau2_posterior(1, 2.0, 1.0, 1.0) == (2.0, 3.0)

    def test_posterior_mean_increases_with_beta(self):
        means = [stats.invgamma(*tau2_posterior(1, b, 2.0, 1.0)[:1], scale=tau2_posterior(1, b, 2.0, 1.0)[1]).mean()
                 for b in (0.5, 1.0, 2.0)]
        assert means[0] < means[1] < means[2]

    def test_draws_follow_closed_form(self):
        rng = np.random.default_rng(7)
        h = Hyperparams(c=1.0, d=1.0)
        draws = [update_tau2(0, 1, 2.0, h, rng) for _ in range(4000)]
        assert stats.kstest(draws, stats.invgamma(2.0, scale=3.0).cdf).pvalue > 0.01


class TestSigma2Conditional:
    @pytest.mark.parametrize("seed", SETTINGS)
    def test_matches_numerical_normalization(self, seed):
        rng = np.random.default_rng(seed)
        n = 20
        e = rng.normal(size=n) * rng.uniform(0.5, 2.0)
        nu = float(rng.uniform(1.0, 10.0))
        r = float(rng.choice([0.0, 0.4]))
        # e'R^{-1}e by dense inverse
        idx = np.arange(n)
        R = r ** np.abs(idx[:, None] - idx[None, :])
        qf = float(e @ np.linalg.solve(R, e))
        shape, scale = sigma2_posterior(nu, n, qf)
        dist = stats.invgamma(shape, scale=scale)
        grid = np.linspace(1e-4, dist.ppf(1 - 1e-10), 200001)
        num = normalize_on_grid(lambda s: -(nu / 2 + 1) * np.log(s) - nu / (2 * s)
                                - n / 2 * np.log(s) - qf / (2 * s), grid)
        closed = dist.pdf(grid)
        assert np.max(np.abs(num - closed)) < 1e-6 * max(1.0, closed.max())

    def test_zero_residual(self):
        assert sigma2_posterior(4.0, 10, 0.0) == (7.0, 2.0)

    def test_residual_doubling_quadruples_data_term(self):
        rng = np.random.default_rng(0)
        X = rng.random((10, 1))
        y = rng.normal(size=10)
        q1 = Quadratics(WindowData(y, X), "full").residual_form(np.zeros(1))
        q2 = Quadratics(WindowData(2 * y, X), "full").residual_form(np.zeros(1))
        assert q2 == pytest.approx(4 * q1, rel=1e-12)

    def test_update_uses_residual(self):
        rng = np.random.default_rng(1)
        X = rng.random((30, 1))
        y = 3.0 * X[:, 0]
        st_ = _state(1, beta=[3.0], nu=4.0)
        quad = Quadratics(WindowData(y, X), "full")
        draws = [update_sigma2(st_, quad, rng) for _ in range(3000)]
        assert stats.kstest(draws, stats.invgamma(17.0, scale=2.0).cdf).pvalue > 0.01


class TestSlabUpdate:
    @pytest.mark.parametrize("A,B,theta,tau2", [
        (4.0, 3.0, 0.5, 1.0), (0.5, -1.0, 0.3, 2.0), (50.0, 5.0, 0.8, 0.2), (1e-3, 0.01, 0.5, 10.0),
        (200.0, -30.0, 0.5, 1.0),
    ])
    def test_inclusion_probability_matches_integration(self, A, B, theta, tau2):
        lo = slab_log_odds(A, B, theta, tau2)
        p = 1.0 / (1.0 + math.exp(-lo))
        assert p == pytest.approx(inclusion_probability(A, B, theta, tau2), abs=1e-6)

    @pytest.mark.parametrize("mu,prec", [(1.0, 4.0), (-2.0, 1.0), (0.0, 100.0), (-30.0, 9.0)])
    def test_truncated_normal_density_and_draws(self, mu, prec):
        sd = 1 / math.sqrt(prec)
        # unnormalised kernel, shifted so its maximum on [0, inf) is 1
        peak = max(mu, 0.0)
        f = lambda b: np.exp(-0.5 * prec * ((b - mu) ** 2 - (peak - mu) ** 2))  # noqa: E731
        hi = max(mu, 0.0) + 40 * sd
        Z, _ = integrate.quad(f, 0.0, hi, limit=400, epsabs=0, epsrel=1e-12)
        grid = np.linspace(0.0, hi, 4001)
        a = -mu * math.sqrt(prec)
        closed = stats.truncnorm(a, np.inf, loc=mu, scale=sd).pdf(grid)
        assert np.max(np.abs(f(grid) / Z - closed)) < 1e-6 * max(1.0, closed.max())
        # inverse-CDF property: survival at the draw equals u
        for u in (0.9, 0.5, 0.1, 1e-6):
            b = truncated_normal_draw(mu, prec, u)
            assert b > 0
            surv, _ = integrate.quad(f, b, hi, limit=400, epsabs=0, epsrel=1e-12)
            assert surv / Z == pytest.approx(u, rel=1e-5, abs=1e-12)

    def test_zero_column_reverts_to_prior(self):
        rng = np.random.default_rng(0)
        X = np.zeros((10, 1))
        y = rng.normal(size=10)
        quad = Quadratics(WindowData(y, X), "full")
        st_ = _state(1)
        st_.theta[:] = 0.3
        zs = [update_beta_z(0, st_, quad, Hyperparams(), rng)[0] for _ in range(20000)]
        assert np.mean(zs) == pytest.approx(0.3, abs=0.015)
        assert slab_log_odds(0.0, 0.0, 0.3, 1.0) == pytest.approx(math.log(0.3 / 0.7))

    def test_exact_zero_when_excluded(self):
        rng = np.random.default_rng(1)
        X = rng.random((10, 2))
        y = rng.normal(size=10) * 0.01
        quad = Quadratics(WindowData(y, X), "full")
        st_ = _state(2)
        for _ in range(500):
            for i in range(2):
                z, b = update_beta_z(i, st_, quad, Hyperparams(), rng)
                assert (b == 0.0) if z == 0 else (b > 0.0)

    def test_force_inclusion(self):
        rng = np.random.default_rng(2)
        X = rng.random((10, 1))
        quad = Quadratics(WindowData(np.zeros(10), X), "full")
        st_ = _state(1)
        for _ in range(100):
            z, b = update_beta_z(0, st_, quad, Hyperparams(), rng, force_inclusion=True)
            assert z == 1 and b > 0


class TestNuUpdate:
    def test_nonpositive_has_zero_density(self):
        assert log_target_nu(-1.0, 1.0, Hyperparams()) == -math.inf
        assert log_target_nu(0.0, 1.0, Hyperparams()) == -math.inf

    def test_long_run_matches_grid_posterior(self):
        rng = np.random.default_rng(3)
        h = Hyperparams(alpha1=2.0, alpha2=4.0)
        st_ = _state(1, sigma2=0.3)
        draws = np.empty(40000)
        for t in range(len(draws)):
            draws[t] = mh_update_nu(st_, h, rng, 0.8)[0]
        w = wasserstein_to_density(draws[2000:], lambda v: log_target_nu(v, 0.3, h), 1e-6, 80.0)
        assert w < 0.1


class TestRUpdate:
    def test_out_of_support_rejected(self):
        class FixedRng:
            def standard_normal(self):
                return 20.0  # proposal r + 20 * sd

            def random(self):
                return 0.0

        X = np.ones((5, 1))
        quad = Quadratics(WindowData(np.zeros(5), X), "full")
        st_ = _state(1, r=0.2)
        r, acc = mh_update_r(st_, quad, FixedRng(), prop_sd=0.05)  # proposes 1.2
        assert not acc and r == 0.2

    @pytest.mark.parametrize("true_r", [0.0, 0.6])
    def test_recovers_generating_r(self, true_r):
        rng = np.random.default_rng(11)
        l, m = 30, 10
        e = np.empty(l * m)
        for k in range(m):
            x = rng.normal()
            e[k * l] = x
            for t in range(1, l):
                x = true_r * x + math.sqrt(1 - true_r**2) * rng.normal()
                e[k * l + t] = x
        from apportion.site import Layout
        wd = WindowData(e, np.zeros((l * m, 1)), layout=Layout(tuple(map(str, range(m))), np.arange(l)))
        quad = Quadratics(wd, "block")
        st_ = _state(1, sigma2=1.0, r=0.3)
        quad.set_r(0.3)
        draws = [mh_update_r(st_, quad, rng, 0.05)[0] for _ in range(6000)]
        assert np.mean(draws[1000:]) == pytest.approx(true_r, abs=0.06)
