"""Pure-Python (numpy/scipy) kernels; the fallback when the compiled core
is unavailable.

Row loops run in original row order so reductions are bit-reproducible and
match the compiled core's semantics.  See ``kernels`` for backend selection.
"""

from __future__ import annotations

import numpy as np
from scipy import linalg as sla

NAME = "python"

_LOG_2PI = float(np.log(2.0 * np.pi))


def chol_lower(a: np.ndarray):
    """Lower Cholesky factor of ``a`` or None when not positive definite."""
    if a.shape[0] == 0:
        return np.empty((0, 0))
    try:
        return sla.cholesky(a, lower=True, check_finite=False)
    except sla.LinAlgError:
        return None


def solve_cholesky(chol: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve (L L^T) x = b given the lower factor L."""
    if chol.shape[0] == 0:
        return np.array(b, dtype=np.float64, copy=True)
    return sla.cho_solve((chol, True), b, check_finite=False)


def estep_rows(z, row_pattern, obs_list, mis_list, w_list, cov_list, include_cov):
    """Fill conditional means row by row and accumulate second moments.

    Returns ``(z_filled, s)`` where ``s`` is the sum over rows of the
    expected outer product of the completed row (conditional covariance
    added on the missing block unless ``include_cov`` is false).
    """
    zf = np.array(z, dtype=np.float64, copy=True)
    n, m = zf.shape
    s = np.zeros((m, m))
    for i in range(n):
        pid = row_pattern[i]
        obs = obs_list[pid]
        mis = mis_list[pid]
        if mis.size:
            zf[i, mis] = w_list[pid].T @ zf[i, obs]
        row = zf[i]
        s += np.outer(row, row)
        if include_cov and mis.size:
            s[np.ix_(mis, mis)] += cov_list[pid]
    return zf, s


def fill_rows(z, row_pattern, obs_list, mis_list, w_list):
    """Conditional-mean fill only (the imputation path)."""
    zf = np.array(z, dtype=np.float64, copy=True)
    for i in range(zf.shape[0]):
        pid = row_pattern[i]
        mis = mis_list[pid]
        if mis.size:
            zf[i, mis] = w_list[pid].T @ zf[i, obs_list[pid]]
    return zf


def loglik_rows(z, row_pattern, obs_list, chol_list, logdets):
    """Sum of per-row Gaussian log densities over each row's observed block."""
    total = 0.0
    for i in range(z.shape[0]):
        pid = row_pattern[i]
        obs = obs_list[pid]
        k = obs.size
        if k == 0:
            continue
        u = sla.solve_triangular(
            chol_list[pid], z[i, obs], lower=True, check_finite=False
        )
        total += -0.5 * (float(u @ u) + logdets[pid] + k * _LOG_2PI)
    return total
