"""Independent oracles used to freeze expected values.

Everything here is deliberately naive and self-contained: arbitrary-precision
series/continued-fraction evaluation for the normal CDF, dense explicit
inverses for conditional moments and likelihoods, and Monte-Carlo moments.
None of it shares code with the package paths it checks.
"""

from __future__ import annotations

import mpmath as mp
import numpy as np

mp.mp.dps = 60

_SQRT2 = mp.sqrt(2)
_SQRT_PI = mp.sqrt(mp.pi)


def _erfc_series(t: mp.mpf) -> mp.mpf:
    """erfc(t) for small t >= 0 via the alternating Taylor series of erf."""
    t2 = t * t
    term = t
    total = t
    n = 0
    while True:
        n += 1
        term *= -t2 / n * (2 * n - 1) / (2 * n + 1)
        total += term
        if abs(term) < mp.mpf(10) ** (-mp.mp.dps):
            break
    return 1 - 2 / _SQRT_PI * total


def _erfc_cf(t: mp.mpf, depth: int = 300) -> mp.mpf:
    """erfc(t) for large t > 0 via the Laplace continued fraction."""
    f = t
    for k in range(depth, 0, -1):
        f = t + (mp.mpf(k) / 2) / f
    return mp.e ** (-t * t) / (_SQRT_PI * f)


def erfc_oracle(t) -> mp.mpf:
    t = mp.mpf(t)
    if t < 0:
        return 2 - erfc_oracle(-t)
    if t <= 3:
        return _erfc_series(t)
    return _erfc_cf(t)


def phi_oracle(x) -> mp.mpf:
    """High-precision standard normal CDF."""
    return erfc_oracle(-mp.mpf(x) / _SQRT2) / 2


def phi_inverse_oracle(p, tol=mp.mpf("1e-30")) -> mp.mpf:
    """Invert phi_oracle by bisection."""
    p = mp.mpf(p)
    if not 0 < p < 1:
        raise ValueError("p must lie in (0, 1)")
    lo, hi = mp.mpf(-40), mp.mpf(40)
    while hi - lo > tol:
        mid = (lo + hi) / 2
        if phi_oracle(mid) < p:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


# ---------------------------------------------------------------------------
# Dense linear-algebra oracles
# ---------------------------------------------------------------------------

def conditional_oracle(sigma, obs, mis, z_obs):
    """Conditional moments via explicit full inverse + Schur complement."""
    sigma = np.asarray(sigma, float)
    obs = np.asarray(obs, int)
    mis = np.asarray(mis, int)
    z_obs = np.asarray(z_obs, float)
    if obs.size == 0:
        return np.zeros(mis.size), sigma[np.ix_(mis, mis)].copy()
    soo_inv = np.linalg.inv(sigma[np.ix_(obs, obs)])
    smo = sigma[np.ix_(mis, obs)]
    mean = smo @ soo_inv @ z_obs
    cov = sigma[np.ix_(mis, mis)] - smo @ soo_inv @ sigma[np.ix_(obs, mis)]
    return mean, cov


def loglik_oracle(z, mask, sigma):
    """Average observed-block Gaussian log density, dense evaluation."""
    z = np.asarray(z, float)
    mask = np.asarray(mask, bool)
    sigma = np.asarray(sigma, float)
    total = 0.0
    for i in range(z.shape[0]):
        obs = np.nonzero(mask[i])[0]
        if obs.size == 0:
            continue
        soo = sigma[np.ix_(obs, obs)]
        sign, logdet = np.linalg.slogdet(soo)
        assert sign > 0
        quad = z[i, obs] @ np.linalg.inv(soo) @ z[i, obs]
        total += -0.5 * (obs.size * np.log(2 * np.pi) + logdet + quad)
    return total / z.shape[0]


def mc_second_moment(sigma, obs, mis, z_obs, n_draws=1_000_000, seed=0):
    """Monte-Carlo estimate of E[z z^T | z_obs] plus per-entry standard errors."""
    sigma = np.asarray(sigma, float)
    m = sigma.shape[0]
    mean, cov = conditional_oracle(sigma, obs, mis, z_obs)
    rng = np.random.default_rng(seed)
    chol = np.linalg.cholesky(cov + 1e-12 * np.eye(len(mis)))
    draws = mean + rng.standard_normal((n_draws, len(mis))) @ chol.T
    full = np.zeros((n_draws, m))
    full[:, obs] = np.asarray(z_obs, float)
    full[:, mis] = draws
    prods = np.einsum("ni,nj->nij", full, full)
    estimate = prods.mean(axis=0)
    se = prods.std(axis=0) / np.sqrt(n_draws)
    return estimate, se


def random_correlation(m, rng, dof=None):
    """Random well-conditioned correlation matrix."""
    dof = dof or m + 3
    a = rng.standard_normal((m, dof))
    s = a @ a.T / dof + 0.2 * np.eye(m)
    d = np.sqrt(np.diag(s))
    return s / np.outer(d, d)
