import os

import numpy as np
import pytest

from assetpricing import kernels
from assetpricing.regress import estimate_beta

BACKENDS = kernels.available_backends()

# xoshiro256** outputs for state (1, 2, 3, 4); the first is rotl(2*5, 7)*9 = 11520
XOSHIRO_REF = [
    11520,
    0,
    1509978240,
    1215971899390074240,
    1216172134540287360,
    607988272756665600,
    16172922978634559625,
    8476171486693032832,
    10595114339597558777,
    2904607092377533576,
]


@pytest.mark.skipif(os.environ.get("ASSETPRICING_PURE_PYTHON") in ("1", "true", "yes"), reason="fallback forced")
def test_compiled_backend_is_built():
    assert "cython" in BACKENDS and kernels.BACKEND == "cython"


@pytest.mark.parametrize("backend", BACKENDS)
def test_xoshiro_reference_vector(backend):
    st = np.array([1, 2, 3, 4], dtype=np.uint64)
    assert kernels.xoshiro_fill(st, 10, backend=backend).tolist() == XOSHIRO_REF


def test_xoshiro_state_advances_identically():
    a = np.array([5, 6, 7, 8], dtype=np.uint64)
    b = a.copy()
    out_a = np.concatenate([kernels.xoshiro_fill(a, 3, backend=bk) for bk in BACKENDS for _ in range(1)])
    out_b = kernels.xoshiro_fill(b, 3 * len(BACKENDS), backend="python")
    assert out_a.tolist() == out_b.tolist()
    assert a.tolist() == b.tolist()


def test_xoshiro_rejects_bad_state():
    with pytest.raises(ValueError):
        kernels.xoshiro_fill(np.zeros(3, dtype=np.uint64), 1)


def _random_returns(rng, S=30, T=60, missing=0.1):
    R = rng.normal(0.01, 0.05, (S, T))
    R[rng.random((S, T)) < missing] = np.nan
    rm = rng.normal(0.01, 0.04, T)
    return R, rm


@pytest.mark.parametrize("backend", BACKENDS)
def test_market_model_batch_matches_ols(rng, backend):
    R, rm = _random_returns(rng)
    beta, alpha, sd, n = kernels.market_model_batch(R, rm, 24, backend=backend)
    for i in range(R.shape[0]):
        est = estimate_beta(R[i], rm, min_obs=24)
        assert beta[i] == pytest.approx(est.beta, rel=1e-10, abs=1e-12)
        assert alpha[i] == pytest.approx(est.alpha, rel=1e-10, abs=1e-12)
        assert sd[i] == pytest.approx(est.residual_sd, rel=1e-10)
        assert n[i] == est.n_obs


def test_market_model_batch_flags_short_rows():
    R = np.full((2, 10), 0.01)
    R[0, :8] = np.nan
    rm = np.linspace(-0.05, 0.05, 10)
    for bk in BACKENDS:
        beta, _, _, n = kernels.market_model_batch(R, rm, 5, backend=bk)
        assert np.isnan(beta[0]) and n[0] == 2
        assert beta[1] == pytest.approx(0.0, abs=1e-15)


def test_backends_agree(rng):
    R, rm = _random_returns(rng, 50, 120)
    outs = [kernels.market_model_batch(R, rm, 12, backend=b) for b in BACKENDS]
    for a, b in zip(outs[0], outs[-1]):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)
    W = rng.uniform(1, 10, R.shape)
    G = rng.integers(-1, 5, R.shape).astype(np.int32)
    sums = [kernels.grouped_sums(R, W, G, 5, backend=b) for b in BACKENDS]
    for a, b in zip(sums[0], sums[-1]):
        np.testing.assert_allclose(a, b, rtol=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
def test_grouped_sums_brute_force(rng, backend):
    R, _ = _random_returns(rng, 20, 15)
    W = rng.uniform(1, 10, R.shape)
    W[rng.random(W.shape) < 0.1] = np.nan
    G = rng.integers(-1, 4, R.shape).astype(np.int32)
    swr, sw, cnt = kernels.grouped_sums(R, W, G, 4, backend=backend)
    for t in range(R.shape[1]):
        for g in range(4):
            m = (G[:, t] == g) & np.isfinite(R[:, t]) & np.isfinite(W[:, t])
            assert swr[t, g] == pytest.approx((W[m, t] * R[m, t]).sum(), abs=1e-14)
            assert sw[t, g] == pytest.approx(W[m, t].sum(), abs=1e-14)
            assert cnt[t, g] == m.sum()


def test_pure_python_env_switch(monkeypatch):
    import importlib

    monkeypatch.setenv("ASSETPRICING_PURE_PYTHON", "1")
    mod = importlib.reload(kernels)
    try:
        assert mod.BACKEND == "python"
    finally:
        monkeypatch.delenv("ASSETPRICING_PURE_PYTHON")
        importlib.reload(kernels)
