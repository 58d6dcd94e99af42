# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Signatures mirror ``_kernels_py`` exactly."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, isfinite, NAN
from libc.stdint cimport uint64_t

cnp.import_array()


def market_model_batch(const double[:, ::1] R, const double[::1] rm, Py_ssize_t min_obs):
    """Per-row OLS of R[i] on [1, rm] over months where both are finite."""
    cdef Py_ssize_t S = R.shape[0], T = R.shape[1], i, t, n
    cdef double sx, sy, xbar, ybar, dx, dy, sxx, sxy, b, a, e, ssr
    if rm.shape[0] != T:
        raise ValueError("rm length must match R columns")
    beta_a = np.full(S, np.nan)
    alpha_a = np.full(S, np.nan)
    sd_a = np.full(S, np.nan)
    nobs_a = np.zeros(S, dtype=np.int64)
    cdef double[::1] beta = beta_a, alpha = alpha_a, sd = sd_a
    cdef long long[::1] nobs = nobs_a
    if min_obs < 3:
        min_obs = 3
    with nogil:
        for i in range(S):
            n = 0
            sx = 0.0
            sy = 0.0
            for t in range(T):
                if isfinite(R[i, t]) and isfinite(rm[t]):
                    n += 1
                    sx += rm[t]
                    sy += R[i, t]
            nobs[i] = n
            if n < min_obs:
                continue
            xbar = sx / n
            ybar = sy / n
            sxx = 0.0
            sxy = 0.0
            for t in range(T):
                if isfinite(R[i, t]) and isfinite(rm[t]):
                    dx = rm[t] - xbar
                    dy = R[i, t] - ybar
                    sxx += dx * dx
                    sxy += dx * dy
            if sxx == 0.0:
                continue
            b = sxy / sxx
            a = ybar - b * xbar
            ssr = 0.0
            for t in range(T):
                if isfinite(R[i, t]) and isfinite(rm[t]):
                    e = R[i, t] - a - b * rm[t]
                    ssr += e * e
            beta[i] = b
            alpha[i] = a
            sd[i] = sqrt(ssr / (n - 2))
    return beta_a, alpha_a, sd_a, nobs_a


def grouped_sums(const double[:, ::1] R, const double[:, ::1] W, const int[:, ::1] G, Py_ssize_t n_groups):
    """Per month and group: sum(w*r), sum(w) and member count.

    Members with a negative group label, or a non-finite return or weight,
    are skipped.
    """
    cdef Py_ssize_t S = R.shape[0], T = R.shape[1], i, t
    cdef int g
    cdef double r, w
    swr_a = np.zeros((T, n_groups))
    sw_a = np.zeros((T, n_groups))
    cnt_a = np.zeros((T, n_groups), dtype=np.int64)
    cdef double[:, ::1] swr = swr_a, sw = sw_a
    cdef long long[:, ::1] cnt = cnt_a
    with nogil:
        for i in range(S):
            for t in range(T):
                g = G[i, t]
                if g < 0 or g >= n_groups:
                    continue
                r = R[i, t]
                w = W[i, t]
                if not (isfinite(r) and isfinite(w)):
                    continue
                swr[t, g] += w * r
                sw[t, g] += w
                cnt[t, g] += 1
    return swr_a, sw_a, cnt_a


cdef inline uint64_t _rotl(uint64_t x, int k) nogil:
    return (x << k) | (x >> (64 - k))


def xoshiro_fill(cnp.uint64_t[::1] state, Py_ssize_t n):
    """Advance xoshiro256** ``n`` steps in place; return the outputs."""
    out_a = np.empty(n, dtype=np.uint64)
    cdef cnp.uint64_t[::1] out = out_a
    cdef uint64_t s0 = state[0], s1 = state[1], s2 = state[2], s3 = state[3], t
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            out[i] = _rotl(s1 * 5, 7) * 9
            t = s1 << 17
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = _rotl(s3, 45)
    state[0] = s0
    state[1] = s1
    state[2] = s2
    state[3] = s3
    return out_a
