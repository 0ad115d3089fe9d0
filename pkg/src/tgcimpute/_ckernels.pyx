# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels for the EM hot loops.

Factorizations and triangular solves are implemented here rather than routed
through BLAS so that results are bit-reproducible regardless of the linear
algebra thread pool; the per-pattern observed blocks are small, the row loop
is what dominates.
"""

from libc.math cimport sqrt

import numpy as np

NAME = "compiled"

cdef double LOG_2PI = 1.8378770664093453


cdef int _chol_inplace(double[:, ::1] a) noexcept nogil:
    """In-place lower Cholesky; returns 1 + the failing pivot, or 0."""
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t i, j, k
    cdef double s
    for j in range(n):
        s = a[j, j]
        for k in range(j):
            s -= a[j, k] * a[j, k]
        if not s > 0.0:  # catches nonpositive pivots and NaN
            return <int> (j + 1)
        a[j, j] = sqrt(s)
        for i in range(j + 1, n):
            s = a[i, j]
            for k in range(j):
                s -= a[i, k] * a[j, k]
            a[i, j] = s / a[j, j]
    for j in range(n):
        for i in range(j + 1, n):
            a[j, i] = 0.0
    return 0


cdef void _solve_chol_inplace(double[:, ::1] chol, double[:, ::1] b) noexcept nogil:
    """Solve (L L^T) x = b in place, column by column."""
    cdef Py_ssize_t n = chol.shape[0], m = b.shape[1]
    cdef Py_ssize_t i, j, c
    cdef double s
    for c in range(m):
        for i in range(n):
            s = b[i, c]
            for j in range(i):
                s -= chol[i, j] * b[j, c]
            b[i, c] = s / chol[i, i]
        for i in range(n - 1, -1, -1):
            s = b[i, c]
            for j in range(i + 1, n):
                s -= chol[j, i] * b[j, c]
            b[i, c] = s / chol[i, i]


def chol_lower(a):
    """Lower Cholesky factor of ``a`` or None when not positive definite."""
    out = np.array(a, dtype=np.float64, order="C", copy=True)
    if out.shape[0] == 0:
        return out
    if _chol_inplace(out):
        return None
    return out


def solve_cholesky(chol, b):
    """Solve (L L^T) x = b given the lower factor L."""
    cdef bint was_1d = b.ndim == 1
    out = np.array(b, dtype=np.float64, order="C", copy=True)
    if chol.shape[0] == 0:
        return out
    if was_1d:
        out = out.reshape(-1, 1)
    cdef double[:, ::1] lv = np.ascontiguousarray(chol, dtype=np.float64)
    _solve_chol_inplace(lv, out)
    return out.reshape(-1) if was_1d else out


def estep_rows(z, row_pattern, obs_list, mis_list, w_list, cov_list, bint include_cov):
    """Fill conditional means row by row and accumulate second moments."""
    zf_arr = np.array(z, dtype=np.float64, order="C", copy=True)
    cdef double[:, ::1] zf = zf_arr
    cdef Py_ssize_t n = zf.shape[0], m = zf.shape[1]
    s_arr = np.zeros((m, m))
    cdef double[:, ::1] s = s_arr
    cdef Py_ssize_t[::1] pattern = np.ascontiguousarray(row_pattern, dtype=np.intp)
    cdef double[::1] mean = np.zeros(m)
    cdef Py_ssize_t[::1] obs, mis
    cdef double[:, ::1] w, cov
    cdef Py_ssize_t i, a, b, k, ko, km, pid
    cdef double v
    for i in range(n):
        pid = pattern[i]
        obs = obs_list[pid]
        mis = mis_list[pid]
        w = w_list[pid]
        ko = obs.shape[0]
        km = mis.shape[0]
        with nogil:
            if km > 0:
                for b in range(km):
                    mean[b] = 0.0
                for k in range(ko):
                    v = zf[i, obs[k]]
                    for b in range(km):
                        mean[b] += w[k, b] * v
                for b in range(km):
                    zf[i, mis[b]] = mean[b]
            for a in range(m):
                v = zf[i, a]
                for b in range(a + 1):
                    s[a, b] += v * zf[i, b]
        if include_cov and km > 0:
            cov = cov_list[pid]
            with nogil:
                for a in range(km):
                    for b in range(a + 1):
                        s[mis[a], mis[b]] += cov[a, b]
    # mirror the accumulated lower triangle
    for a in range(m):
        for b in range(a):
            s[b, a] = s[a, b]
    return zf_arr, s_arr


def fill_rows(z, row_pattern, obs_list, mis_list, w_list):
    """Conditional-mean fill only (the imputation path)."""
    zf_arr = np.array(z, dtype=np.float64, order="C", copy=True)
    cdef double[:, ::1] zf = zf_arr
    cdef Py_ssize_t n = zf.shape[0], m = zf.shape[1]
    cdef Py_ssize_t[::1] pattern = np.ascontiguousarray(row_pattern, dtype=np.intp)
    cdef double[::1] mean = np.zeros(m)
    cdef Py_ssize_t[::1] obs, mis
    cdef double[:, ::1] w
    cdef Py_ssize_t i, b, k, ko, km, pid
    cdef double v
    for i in range(n):
        pid = pattern[i]
        mis = mis_list[pid]
        km = mis.shape[0]
        if km == 0:
            continue
        obs = obs_list[pid]
        w = w_list[pid]
        ko = obs.shape[0]
        with nogil:
            for b in range(km):
                mean[b] = 0.0
            for k in range(ko):
                v = zf[i, obs[k]]
                for b in range(km):
                    mean[b] += w[k, b] * v
            for b in range(km):
                zf[i, mis[b]] = mean[b]
    return zf_arr


def loglik_rows(z, row_pattern, obs_list, chol_list, logdets):
    """Sum of per-row Gaussian log densities over each row's observed block."""
    cdef double[:, ::1] zv = np.ascontiguousarray(z, dtype=np.float64)
    cdef Py_ssize_t n = zv.shape[0], m = zv.shape[1]
    cdef Py_ssize_t[::1] pattern = np.ascontiguousarray(row_pattern, dtype=np.intp)
    cdef double[::1] dets = np.ascontiguousarray(logdets, dtype=np.float64)
    cdef double[::1] u = np.zeros(m)
    cdef Py_ssize_t[::1] obs
    cdef double[:, ::1] chol
    cdef Py_ssize_t i, a, b, ko, pid
    cdef double s, quad, total = 0.0
    for i in range(n):
        pid = pattern[i]
        obs = obs_list[pid]
        ko = obs.shape[0]
        if ko == 0:
            continue
        chol = chol_list[pid]
        with nogil:
            quad = 0.0
            for a in range(ko):
                s = zv[i, obs[a]]
                for b in range(a):
                    s -= chol[a, b] * u[b]
                u[a] = s / chol[a, a]
                quad += u[a] * u[a]
            total += -0.5 * (quad + dets[pid] + ko * LOG_2PI)
    return total
