import numpy as np
import pytest

from assetpricing.errors import EngineError
from assetpricing.panel import MonthKey, load_market_index, load_panel
from assetpricing.regress import estimate_beta
from assetpricing.synth import (
    DgpConfig,
    Xoshiro256StarStar,
    config_from_mapping,
    generate_capm_market,
    generate_ff3_market,
    read_manifest,
    write_synth,
)

SMALL = DgpConfig(n_securities=30, n_months=36, idio_sd_range=(0.01, 0.03), missing_rate=0.02)


def test_rng_streams_are_reproducible():
    a = Xoshiro256StarStar(42)
    b = Xoshiro256StarStar(42)
    assert np.array_equal(a.normal(100), b.normal(100))
    assert not np.array_equal(Xoshiro256StarStar(43).uniform(10), Xoshiro256StarStar(42).uniform(10))
    u = Xoshiro256StarStar(1).uniform(10000)
    assert u.min() >= 0 and u.max() < 1 and abs(u.mean() - 0.5) < 0.02


@pytest.mark.parametrize("gen", [generate_capm_market, generate_ff3_market])
def test_generation_deterministic(gen):
    a, b = gen(SMALL), gen(SMALL)
    assert np.array_equal(a.panel.returns, b.panel.returns, equal_nan=True)
    assert np.array_equal(a.market_index, b.market_index)
    c = gen(SMALL.replace(seed=1))
    assert not np.array_equal(a.panel.returns, c.panel.returns, equal_nan=True)


@pytest.mark.parametrize("gen", [generate_capm_market, generate_ff3_market])
def test_manifest_round_trip(tmp_path, gen):
    m = gen(SMALL)
    paths = write_synth(m, tmp_path)
    man = read_manifest(paths["manifest"])
    assert man.config == SMALL and man.model == m.manifest.model
    R = man.returns()
    ok = m.panel.has_row
    assert np.array_equal(R[ok], m.panel.returns[ok])
    p = load_panel(paths["returns"], paths["fundamentals"], paths["riskfree"])
    assert np.array_equal(p.returns, m.panel.returns, equal_nan=True)
    assert p.security_ids == m.panel.security_ids and p.months == m.panel.months
    idx = load_market_index(paths["market_index"], p)
    assert np.array_equal(idx, m.market_index)


def test_missing_rows():
    m = generate_capm_market(SMALL)
    frac = 1 - m.panel.has_row.mean()
    assert 0 < frac < 0.06


def test_capm_zero_noise_betas_exact():
    m = generate_capm_market(DgpConfig(n_securities=10, n_months=60))
    rf = m.panel.risk_free
    for i in range(10):
        b = estimate_beta(m.panel.returns[i] - rf, m.market_index - rf)
        assert b.beta == pytest.approx(m.manifest.beta[i], abs=1e-12)


def test_ff3_loadings_follow_ranks():
    man = generate_ff3_market(DgpConfig(n_securities=50, n_months=24)).manifest
    o = np.argsort(man.size)
    assert np.all(np.diff(man.s[o]) <= 1e-12)
    o = np.argsort(man.beme)
    assert np.all(np.diff(man.h[o]) >= -1e-12)


@pytest.mark.parametrize(
    "kw",
    [
        {"n_months": 0},
        {"n_securities": 0},
        {"market_sd": -1.0},
        {"beta_range": (2.0, 1.0)},
        {"float_ratio": 0.0},
        {"missing_rate": 1.0},
        {"start_month": 13},
    ],
)
def test_invalid_config(kw):
    with pytest.raises(EngineError, match="INVALID_CONFIG"):
        DgpConfig(**kw)


def test_config_from_mapping():
    cfg = config_from_mapping({"n_securities": "12", "beta_range": "0.8,1.2", "dynamic_caps": "true"})
    assert cfg.n_securities == 12 and cfg.beta_range == (0.8, 1.2) and cfg.dynamic_caps
    with pytest.raises(EngineError, match="INVALID_CONFIG"):
        config_from_mapping({"bogus": "1"})
    with pytest.raises(EngineError, match="INVALID_CONFIG"):
        config_from_mapping({"n_months": "abc"})
    assert cfg.months[0] == MonthKey(2000, 1)
