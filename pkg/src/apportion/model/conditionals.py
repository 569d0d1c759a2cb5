"""Full conditional updates of the spike-and-slab regression with AR(1) errors.

Model, per window::

    y | beta, sigma2, r   ~ N(X beta, sigma2 R(r))
    beta_i | z_i, tau2_i  ~ 0 if z_i = 0, Exp(scale tau2_i) if z_i = 1
    z_i | theta_i         ~ Bernoulli(theta_i)
    theta_i ~ Beta(a_i, b_i),  tau2_i ~ IG(c_i, d_i)
    sigma2 | nu ~ IG(nu/2, nu/2),  nu ~ IG(alpha1, alpha2),  r ~ U(0, 1)

Holding everything but ``beta_i`` fixed, the log likelihood is
``-A beta_i^2 / 2 + B beta_i`` up to a constant, with ``A = G_ii / sigma2`` and
``B = (h_i - sum_{j != i} G_ij beta_j) / sigma2`` where ``G = X'R^{-1}X`` and
``h = X'R^{-1}y``. Integrating the exponential slab against it gives the
Bernoulli odds for ``z_i`` in closed form; given ``z_i = 1`` the slab
posterior is a normal truncated to ``[0, inf)``.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import gammaln, log_ndtr, ndtri_exp

from .state import Hyperparams, ModelState, Quadratics

_LOG_2PI = math.log(2.0 * math.pi)


class NumericalUnderflow(ArithmeticError):
    """The inclusion odds could not be evaluated in the log domain."""


def log_inv_gamma(x, shape, scale):
    """Log density of IG(shape, scale) at ``x``; ``-inf`` outside ``x > 0``."""
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = shape * np.log(scale) - gammaln(shape) - (shape + 1.0) * np.log(x) - scale / x
    return np.where(x > 0, out, -np.inf)


def _log_ig(x: float, shape: float, scale: float) -> float:
    return shape * math.log(scale) - math.lgamma(shape) - (shape + 1.0) * math.log(x) - scale / x


def slab_log_odds(A: float, B: float, theta: float, tau2: float) -> float:
    """``log P(z=1 | rest) - log P(z=0 | rest)`` with ``beta_i`` integrated out."""
    prior = math.log(theta) - math.log1p(-theta)
    Bt = B - 1.0 / tau2
    if A <= 0.0:
        # No likelihood curvature: the integral of the slab is finite only if Bt < 0.
        if Bt >= 0.0:
            return math.inf
        return prior - math.log(tau2) - math.log(-Bt)
    s = math.sqrt(A)
    out = prior - math.log(tau2) + 0.5 * (_LOG_2PI - math.log(A)) + 0.5 * Bt * Bt / A \
        + float(log_ndtr(Bt / s))
    if math.isnan(out):
        raise NumericalUnderflow(f"inclusion odds undefined for A={A}, B={B}, tau2={tau2}")
    return out


def truncated_normal_draw(mu: float, prec: float, u: float) -> float:
    """Inverse-CDF draw from N(mu, 1/prec) truncated to ``(0, inf)`` using uniform ``u``.

    Works in the log domain so it stays accurate far into either tail.
    """
    s = math.sqrt(prec)
    a = -mu * s
    # P(Z > t) = u * P(Z > a)  ->  t = -Phi^{-1}(u * Phi(-a))
    t = -float(ndtri_exp(math.log(u) + float(log_ndtr(-a))))
    t = max(t, a)
    beta = mu + t / s
    return beta if beta > 0.0 else math.ulp(0.0)


def slab_conditional(i: int, state: ModelState, quad: Quadratics) -> tuple[float, float]:
    """``(A, B)`` for source ``i`` at the current state."""
    G = quad.G
    A = G[i, i] / state.sigma2
    B = (quad.h[i] - float(G[i] @ state.beta) + G[i, i] * state.beta[i]) / state.sigma2
    return A, B


def update_beta_z(i: int, state: ModelState, quad: Quadratics, hyper: Hyperparams,
                  rng: np.random.Generator, force_inclusion: bool = False) -> tuple[int, float]:
    """Draw ``(z_i, beta_i)`` jointly; writes them into ``state`` and returns them."""
    A, B = slab_conditional(i, state, quad)
    tau2 = float(state.tau2[i])
    if force_inclusion:
        z = 1
    else:
        lo = slab_log_odds(A, B, float(state.theta[i]), tau2)
        if lo >= 0.0:
            p1 = 1.0 / (1.0 + math.exp(-lo))
        else:
            e = math.exp(lo)
            p1 = e / (1.0 + e)
        z = int(rng.random() < p1)
    if z:
        Bt = B - 1.0 / tau2
        u = 1.0 - rng.random()  # in (0, 1]
        if A > 0.0:
            beta = truncated_normal_draw(Bt / A, A, u)
        else:
            beta = max(-math.log(u) / (-Bt), math.ulp(0.0))
    else:
        beta = 0.0
    state.z[i] = z
    state.beta[i] = beta
    return z, beta


def _hyper(hyper: Hyperparams, name: str, i: int) -> float:
    v = np.asarray(getattr(hyper, name), dtype=float)
    return float(v) if v.ndim == 0 else float(v[i])


def theta_posterior(z_i: int, a: float, b: float) -> tuple[float, float]:
    """Beta parameters of ``theta_i | z_i``."""
    return a + z_i, b + 1 - z_i


def tau2_posterior(z_i: int, beta_i: float, c: float, d: float) -> tuple[float, float]:
    """Inverse-gamma shape and scale of ``tau2_i | z_i, beta_i``."""
    return c + z_i, d + z_i * beta_i


def update_theta(i: int, z_i: int, hyper: Hyperparams, rng: np.random.Generator) -> float:
    """Draw ``theta_i ~ Beta(a_i + z_i, b_i + 1 - z_i)``."""
    return float(rng.beta(*theta_posterior(z_i, _hyper(hyper, "a", i), _hyper(hyper, "b", i))))


def update_tau2(i: int, z_i: int, beta_i: float, hyper: Hyperparams, rng: np.random.Generator) -> float:
    """Draw ``tau2_i ~ IG(c_i + z_i, d_i + z_i beta_i)``."""
    shape, scale = tau2_posterior(z_i, beta_i, _hyper(hyper, "c", i), _hyper(hyper, "d", i))
    return float(scale / rng.gamma(shape))


def sigma2_posterior(nu: float, n: int, quad_form: float) -> tuple[float, float]:
    """Shape and scale of the inverse-gamma conditional of ``sigma2``."""
    return 0.5 * (nu + n), 0.5 * (nu + quad_form)


def update_sigma2(state: ModelState, quad: Quadratics, rng: np.random.Generator) -> float:
    """Draw ``sigma2 ~ IG((nu + n)/2, (nu + e'R^{-1}e)/2)``."""
    shape, scale = sigma2_posterior(state.nu, quad.n, quad.residual_form(state.beta))
    state.sigma2 = float(scale / rng.gamma(shape))
    return state.sigma2


def log_target_nu(nu: float, sigma2: float, hyper: Hyperparams) -> float:
    """Unnormalised ``log p(nu | sigma2)``; ``-inf`` for ``nu <= 0``."""
    if not nu > 0.0:
        return -math.inf
    return _log_ig(sigma2, 0.5 * nu, 0.5 * nu) + _log_ig(nu, hyper.alpha1, hyper.alpha2)


def mh_update_nu(state: ModelState, hyper: Hyperparams, rng: np.random.Generator,
                 prop_sd: float = 0.5) -> tuple[float, bool]:
    """Random-walk Metropolis on ``log nu`` (the Jacobian ``nu`` enters the ratio)."""
    cur = state.nu
    prop = cur * math.exp(prop_sd * rng.standard_normal())
    log_u = math.log(1.0 - rng.random())
    ratio = (log_target_nu(prop, state.sigma2, hyper) + math.log(prop)
             - log_target_nu(cur, state.sigma2, hyper) - math.log(cur))
    if log_u < ratio:
        state.nu = prop
        return prop, True
    return cur, False


def log_target_r(r: float, beta: np.ndarray, sigma2: float, quad: Quadratics) -> float:
    """Unnormalised ``log p(r | beta, sigma2, y)`` under the uniform prior."""
    if not 0.0 <= r < 1.0:
        return -math.inf
    return -0.5 * quad.lags.logdet(r) - 0.5 * quad.residual_form(beta, r) / sigma2


def mh_update_r(state: ModelState, quad: Quadratics, rng: np.random.Generator,
                prop_sd: float = 0.05) -> tuple[float, bool]:
    """Gaussian random-walk Metropolis on ``r``; proposals outside ``[0, 1)`` are rejected.

    On acceptance ``quad`` is refreshed to the new ``r``.
    """
    cur = state.r
    prop = cur + prop_sd * rng.standard_normal()
    log_u = math.log(1.0 - rng.random())
    if not 0.0 <= prop < 1.0:
        return cur, False
    ratio = log_target_r(prop, state.beta, state.sigma2, quad) - log_target_r(cur, state.beta, state.sigma2, quad)
    if log_u < ratio:
        state.r = prop
        quad.set_r(prop)
        return prop, True
    return cur, False
