"""Least-squares engine and the beta / residual-risk estimators built on it."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import EngineError

RANK_TOL = 1e-10
DEFAULT_MIN_OBS = 24


@dataclass(frozen=True)
class RegressionResult:
    coefficients: np.ndarray
    std_errors: np.ndarray
    t_stats: np.ndarray
    r_squared: float
    adj_r_squared: float
    residual_sd: float
    n_obs: int
    df_resid: int
    residuals: np.ndarray
    centered: bool = True


def _t_stats(coef: np.ndarray, se: np.ndarray) -> np.ndarray:
    t = np.empty_like(coef)
    pos = se > 0
    t[pos] = coef[pos] / se[pos]
    # zero standard error: infinite t for a nonzero estimate, zero otherwise
    t[~pos] = np.where(coef[~pos] != 0, np.copysign(np.inf, coef[~pos]), 0.0)
    return t


def _has_constant(X: np.ndarray) -> bool:
    return bool(np.any(np.all(X == X[0:1, :], axis=0) & (X[0, :] != 0)))


def ols_fit(X, y, *, rank_tol: float = RANK_TOL) -> RegressionResult:
    """Ordinary least squares via Householder QR.

    Parameters
    ----------
    X : array_like, shape (n, k)
        Design matrix; include a column of ones for an intercept.
    y : array_like, shape (n,)
    rank_tol : float
        Column j is dependent when the norm of its residual after
        projection on columns 0..j-1 (``|R[j, j]|``) is below
        ``rank_tol`` times the column's own norm.

    Returns
    -------
    RegressionResult
        Classical standard errors; residual s.d. uses ``n - k``. R-squared
        is centred when X has a constant column and uncentred otherwise.

    Raises
    ------
    EngineError
        DIMENSION_MISMATCH, NON_FINITE, TOO_FEW_OBS or RANK_DEFICIENT.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise EngineError("DIMENSION_MISMATCH", f"X {X.shape} vs y {y.shape}")
    n, k = X.shape
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise EngineError("NON_FINITE", "design matrix or response has non-finite entries")
    if n <= k:
        raise EngineError("TOO_FEW_OBS", f"n={n} must exceed k={k}")

    Q, R = np.linalg.qr(X, mode="reduced")
    col_norm = np.linalg.norm(X, axis=0)
    diag = np.abs(np.diag(R))
    dependent = diag <= rank_tol * col_norm
    if np.any(dependent):
        raise EngineError("RANK_DEFICIENT", f"dependent columns {np.nonzero(dependent)[0].tolist()}")

    coef = solve_triangular(R, Q.T @ y)
    resid = y - X @ coef
    ssr = float(resid @ resid)
    df = n - k
    sigma2 = ssr / df
    R_inv = solve_triangular(R, np.eye(k))
    se = np.sqrt(sigma2 * np.einsum("ij,ij->i", R_inv, R_inv))

    centered = _has_constant(X)
    tss = float(((y - y.mean()) ** 2).sum()) if centered else float(y @ y)
    r2 = 1.0 - ssr / tss if tss > 0 else 0.0
    r2 = min(max(r2, 0.0), 1.0)
    adj = 1.0 - (1.0 - r2) * (n - 1) / df
    return RegressionResult(
        coefficients=coef,
        std_errors=se,
        t_stats=_t_stats(coef, se),
        r_squared=r2,
        adj_r_squared=adj,
        residual_sd=float(np.sqrt(sigma2)),
        n_obs=n,
        df_resid=df,
        residuals=resid,
        centered=centered,
    )


def with_intercept(*columns) -> np.ndarray:
    cols = [np.asarray(c, dtype=float) for c in columns]
    return np.column_stack([np.ones(len(cols[0]))] + cols)


@dataclass(frozen=True)
class BetaEstimate:
    beta: float
    alpha: float
    residual_sd: float
    n_obs: int


def _aligned(r_i, r_m):
    r_i = np.asarray(r_i, dtype=float)
    r_m = np.asarray(r_m, dtype=float)
    if r_i.shape != r_m.shape or r_i.ndim != 1:
        raise EngineError("DIMENSION_MISMATCH", f"series shapes {r_i.shape} and {r_m.shape}")
    # months missing in either series are dropped pairwise
    ok = np.isfinite(r_i) & np.isfinite(r_m)
    return r_i[ok], r_m[ok]


def covariance_beta(r_i, r_m, *, min_obs: int = DEFAULT_MIN_OBS) -> float:
    """Beta as sample cov(r_i, r_m) / sample var(r_m), both with n - 1."""
    y, x = _aligned(r_i, r_m)
    if len(x) < max(min_obs, 2):
        raise EngineError("TOO_FEW_OBS", f"{len(x)} overlapping months < {min_obs}")
    if np.all(x == x[0]):
        raise EngineError("ZERO_MARKET_VARIANCE")
    dx = x - x.mean()
    var = float(dx @ dx) / (len(x) - 1)
    cov = float(dx @ (y - y.mean())) / (len(x) - 1)
    return cov / var


def estimate_beta(r_i, r_m, *, min_obs: int = DEFAULT_MIN_OBS) -> BetaEstimate:
    """Market-model regression r_i = alpha + beta * r_m + e on overlapping months."""
    y, x = _aligned(r_i, r_m)
    if len(x) < max(min_obs, 3):
        raise EngineError("TOO_FEW_OBS", f"{len(x)} overlapping months < {min_obs}")
    if np.all(x == x[0]):
        raise EngineError("ZERO_MARKET_VARIANCE")
    res = ols_fit(with_intercept(x), y)
    return BetaEstimate(
        beta=float(res.coefficients[1]),
        alpha=float(res.coefficients[0]),
        residual_sd=res.residual_sd,
        n_obs=res.n_obs,
    )


def portfolio_beta(member_betas, weights=None, *, tol: float = 1e-12) -> float:
    """Weighted average of member betas; equal weights when ``weights`` is None."""
    b = np.asarray(member_betas, dtype=float)
    if b.size == 0:
        raise EngineError("EMPTY_PORTFOLIO")
    if weights is None:
        return float(b.mean())
    w = np.asarray(weights, dtype=float)
    if w.shape != b.shape:
        raise EngineError("DIMENSION_MISMATCH", f"{w.shape} weights for {b.shape} betas")
    if np.any(w < 0) or abs(float(w.sum()) - 1.0) > tol:
        raise EngineError("WEIGHT_SUM", f"weights must be nonnegative and sum to 1 (sum={w.sum()!r})")
    return float(w @ b)
