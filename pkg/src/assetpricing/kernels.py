"""Kernel dispatch: compiled extension if importable, else numpy fallback.

``BACKEND`` is ``"cython"`` or ``"python"``. Set the environment variable
``ASSETPRICING_PURE_PYTHON=1`` before import to force the fallback.
"""
from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

_compiled = None
if os.environ.get("ASSETPRICING_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"
_impl = _compiled if _compiled is not None else _kernels_py


def market_model_batch(R, rm, min_obs: int = 3, *, backend: str | None = None):
    """Market-model regressions for every row of ``R`` at once.

    Parameters
    ----------
    R : ndarray, shape (S, T)
        Security returns, NaN where unobserved.
    rm : ndarray, shape (T,)
        Market returns.
    min_obs : int
        Rows with fewer jointly finite months (or zero market variance)
        get NaN estimates. Never below 3.

    Returns
    -------
    beta, alpha, residual_sd, n_obs : ndarrays of length S
    """
    impl = _pick(backend)
    R = np.ascontiguousarray(R, dtype=np.float64)
    rm = np.ascontiguousarray(rm, dtype=np.float64)
    return impl.market_model_batch(R, rm, int(min_obs))


def grouped_sums(R, W, G, n_groups: int, *, backend: str | None = None):
    """Per (month, group) sums of ``W*R``, ``W`` and member counts.

    ``G`` holds a group label per security-month; negative means "not a
    member". Outputs have shape (T, n_groups).
    """
    impl = _pick(backend)
    R = np.ascontiguousarray(R, dtype=np.float64)
    W = np.ascontiguousarray(W, dtype=np.float64)
    G = np.ascontiguousarray(G, dtype=np.int32)
    return impl.grouped_sums(R, W, G, int(n_groups))


def xoshiro_fill(state: np.ndarray, n: int, *, backend: str | None = None):
    """Draw ``n`` raw 64-bit outputs, advancing ``state`` (uint64[4]) in place."""
    impl = _pick(backend)
    if state.dtype != np.uint64 or state.shape != (4,):
        raise ValueError("state must be a uint64 array of length 4")
    return impl.xoshiro_fill(state, int(n))


def _pick(backend):
    if backend is None:
        return _impl
    if backend == "python":
        return _kernels_py
    if backend == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not available")
        return _compiled
    raise ValueError(f"unknown backend {backend!r}")


def available_backends() -> list[str]:
    return ["python"] + (["cython"] if _compiled is not None else [])
