"""Independent reference computations used by the tests.

Everything here is written from the model definition with dense linear algebra
and plain quadrature, without calling the package's own formulas.
"""

from __future__ import annotations

import numpy as np
from scipy import integrate


def dense_ar_corr(r, lengths):
    n = sum(lengths)
    R = np.zeros((n, n))
    off = 0
    for l in lengths:
        for i in range(l):
            for j in range(l):
                R[off + i, off + j] = r ** abs(i - j)
        off += l
    return R


def dense_quadratics(y, X, r, lengths):
    R = dense_ar_corr(r, lengths)
    Ri = np.linalg.inv(R)
    sign, logdet = np.linalg.slogdet(R)
    assert sign > 0
    return X.T @ Ri @ X, X.T @ Ri @ y, float(y @ Ri @ y), float(logdet)


def normalize_on_grid(log_f, grid):
    """Numerically normalised density values of ``exp(log_f)`` on ``grid``."""
    lf = log_f(grid)
    lf = lf - lf.max()
    f = np.exp(lf)
    return f / integrate.trapezoid(f, grid)


def normalize_quad(f, lo, hi, points=None):
    """``f / integral(f)`` as a callable, with the integral from adaptive quadrature."""
    Z, _ = integrate.quad(f, lo, hi, points=points, limit=400, epsabs=0, epsrel=1e-12)
    return lambda x: f(x) / Z


def inclusion_probability(A, B, theta, tau2):
    """P(z=1) for one source by direct integration of the slab against the likelihood.

    Likelihood in beta: exp(-A beta^2 / 2 + B beta). The mode is used as a
    scaling point so the integrand stays in range.
    """
    def log_like(b):
        return -0.5 * A * b * b + B * b

    def log_slab(b):
        return -np.log(tau2) - b / tau2

    mode = max((B - 1.0 / tau2) / A, 0.0) if A > 0 else 0.0
    ref = log_like(mode) + log_slab(mode)
    sd = 1.0 / np.sqrt(A) if A > 0 else tau2
    hi = mode + 40.0 * sd + 40.0 * tau2
    val, _ = integrate.quad(lambda b: np.exp(log_like(b) + log_slab(b) - ref), 0.0, hi,
                            points=[mode], limit=400, epsabs=0, epsrel=1e-11)
    # z = 0 corresponds to beta = 0, likelihood factor exp(0)
    log_on = np.log(theta) + np.log(val) + ref
    log_off = np.log1p(-theta)
    m = max(log_on, log_off)
    return float(np.exp(log_on - m) / (np.exp(log_on - m) + np.exp(log_off - m)))


def tiny_posterior(y, X, sigma2, r, lengths, a=1.0, b=1.0, c=1.0, d=1.0, n_grid=801, beta_max=None):
    """Posterior over ``(z, beta)`` for two sources with sigma2 and r held fixed.

    ``theta`` integrates out to a Beta-Bernoulli prior ``P(z_i = 1) = a/(a+b)``
    and ``tau2`` to a Lomax slab ``c d^c / (d + beta)^(c+1)``. The four ``z``
    configurations are enumerated; ``beta`` is integrated on a grid.
    Returns posterior means of beta and of z.
    """
    R = dense_ar_corr(r, lengths)
    Ri = np.linalg.inv(R)
    p = X.shape[1]
    assert p == 2
    G = X.T @ Ri @ X
    h = X.T @ Ri @ y
    yy = float(y @ Ri @ y)
    if beta_max is None:
        ols = np.linalg.solve(G, h)
        sd = np.sqrt(np.diag(np.linalg.inv(G)) * sigma2)
        beta_max = float(np.max(np.abs(ols) + 12 * sd))
    grid = np.linspace(0.0, beta_max, n_grid)

    def loglik(B1, B2):
        q = yy - 2 * (h[0] * B1 + h[1] * B2) + G[0, 0] * B1 ** 2 + 2 * G[0, 1] * B1 * B2 + G[1, 1] * B2 ** 2
        return -0.5 * q / sigma2

    def log_slab(bv):
        return np.log(c) + c * np.log(d) - (c + 1) * np.log(d + bv)

    pz = a / (a + b)
    lp_on, lp_off = np.log(pz), np.log1p(-pz)
    ref = loglik(0.0, 0.0)
    out = {}
    # z = (0, 0)
    out[(0, 0)] = (2 * lp_off + loglik(0.0, 0.0) - ref, 0.0, 0.0)
    # z = (1, 0) and (0, 1)
    for k in (0, 1):
        ll = loglik(grid, 0.0) if k == 0 else loglik(0.0, grid)
        lf = ll + log_slab(grid)
        m = lf.max()
        w = np.exp(lf - m)
        Z = integrate.trapezoid(w, grid)
        mean = integrate.trapezoid(w * grid, grid) / Z
        lz = lp_on + lp_off + m + np.log(Z) - ref
        out[(1, 0) if k == 0 else (0, 1)] = (lz, mean if k == 0 else 0.0, mean if k == 1 else 0.0)
    # z = (1, 1)
    B1, B2 = np.meshgrid(grid, grid, indexing="ij")
    lf = loglik(B1, B2) + log_slab(B1) + log_slab(B2)
    m = lf.max()
    w = np.exp(lf - m)
    Z = integrate.trapezoid(integrate.trapezoid(w, grid, axis=1), grid)
    m1 = integrate.trapezoid(integrate.trapezoid(w * B1, grid, axis=1), grid) / Z
    m2 = integrate.trapezoid(integrate.trapezoid(w * B2, grid, axis=1), grid) / Z
    out[(1, 1)] = (2 * lp_on + m + np.log(Z) - ref, m1, m2)

    keys = list(out)
    lz = np.array([out[k][0] for k in keys])
    pw = np.exp(lz - lz.max())
    pw /= pw.sum()
    beta_mean = np.array([sum(pw[j] * out[k][1 + i] for j, k in enumerate(keys)) for i in range(2)])
    z_mean = np.array([sum(pw[j] * k[i] for j, k in enumerate(keys)) for i in range(2)])
    return beta_mean, z_mean


def wasserstein_to_density(samples, log_f, lo, hi, n_grid=200001):
    """W1 distance between ``samples`` and the density ``exp(log_f)`` restricted to ``[lo, hi]``."""
    grid = np.linspace(lo, hi, n_grid)
    lf = np.array([log_f(v) for v in grid])
    f = np.exp(lf - lf.max())
    F = integrate.cumulative_trapezoid(f, grid, initial=0.0)
    F /= F[-1]
    emp = np.searchsorted(np.sort(samples), grid, side="right") / len(samples)
    return float(integrate.trapezoid(np.abs(emp - F), grid))
