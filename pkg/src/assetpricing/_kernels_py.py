"""Numpy / pure-Python versions of the compiled kernels.

Used when the Cython extension is not built, or when
``ASSETPRICING_PURE_PYTHON=1`` is set. Results agree with the compiled
path to rounding (summation order differs), not bit-for-bit.
"""
from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def market_model_batch(R, rm, min_obs):
    R = np.asarray(R, dtype=float)
    rm = np.asarray(rm, dtype=float)
    if rm.shape[0] != R.shape[1]:
        raise ValueError("rm length must match R columns")
    min_obs = max(int(min_obs), 3)
    mask = np.isfinite(R) & np.isfinite(rm)[None, :]
    n = mask.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        x = np.where(mask, rm[None, :], 0.0)
        y = np.where(mask, R, 0.0)
        xbar = x.sum(axis=1) / n
        ybar = y.sum(axis=1) / n
        dx = np.where(mask, rm[None, :] - xbar[:, None], 0.0)
        dy = np.where(mask, R - ybar[:, None], 0.0)
        sxx = (dx * dx).sum(axis=1)
        sxy = (dx * dy).sum(axis=1)
        beta = sxy / sxx
        alpha = ybar - beta * xbar
        e = np.where(mask, R - alpha[:, None] - beta[:, None] * rm[None, :], 0.0)
        sd = np.sqrt((e * e).sum(axis=1) / (n - 2))
    bad = (n < min_obs) | (sxx == 0.0)
    beta[bad] = np.nan
    alpha[bad] = np.nan
    sd[bad] = np.nan
    return beta, alpha, sd, n.astype(np.int64)


def grouped_sums(R, W, G, n_groups):
    R = np.asarray(R, dtype=float)
    W = np.asarray(W, dtype=float)
    G = np.asarray(G)
    T = R.shape[1]
    ok = (G >= 0) & (G < n_groups) & np.isfinite(R) & np.isfinite(W)
    # flat bin = t * n_groups + g
    t_idx = np.broadcast_to(np.arange(T), R.shape)
    bins = (t_idx * n_groups + G)[ok]
    size = T * n_groups
    swr = np.bincount(bins, weights=(W * R)[ok], minlength=size)
    sw = np.bincount(bins, weights=W[ok], minlength=size)
    cnt = np.bincount(bins, minlength=size)
    return (
        swr.reshape(T, n_groups),
        sw.reshape(T, n_groups),
        cnt.astype(np.int64).reshape(T, n_groups),
    )


def xoshiro_fill(state, n):
    s0, s1, s2, s3 = (int(v) for v in state)
    out = np.empty(n, dtype=np.uint64)
    for i in range(n):
        x = (s1 * 5) & _MASK64
        out[i] = ((((x << 7) | (x >> 57)) & _MASK64) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & _MASK64
    state[0], state[1], state[2], state[3] = s0, s1, s2, s3
    return out
