import numpy as np
import pandas as pd
import pytest

from assetpricing import inference
from assetpricing.factors import CELLS_5X5
from assetpricing.ff3 import (
    SpecKind,
    descriptive_stats,
    grid_long,
    grid_markdown,
    run_ff3_study,
    run_spec,
    spread_tests,
)
from assetpricing.panel import MonthKey
from assetpricing.synth import DgpConfig, generate_ff3_market


def _factors(rng, T=120):
    idx = pd.Index([MonthKey(2000, 5) + k for k in range(T)], name="month")
    f = pd.DataFrame(rng.normal(0, 0.04, (T, 3)), columns=["mkt_excess", "smb", "hml"], index=idx)
    return f.assign(rf=0.002, rm=f.mkt_excess + 0.002)


def test_portfolio_equal_to_market(rng):
    f = _factors(rng)
    ex = pd.DataFrame({c: f.mkt_excess for c in CELLS_5X5})
    g = run_spec(SpecKind.MKT_ONLY, ex, f)
    np.testing.assert_allclose(g.stats["b"], 1.0, atol=1e-12)
    np.testing.assert_allclose(g.stats["a"], 0.0, atol=1e-14)
    np.testing.assert_allclose(g.stats["r2"], 1.0, atol=1e-12)
    assert g.coefficient_names() == ("a", "b")


def test_three_factor_recovery(rng):
    f = _factors(rng)
    y = 1.0 * f.mkt_excess + 1.3 * f.smb + 0.5 * f.hml
    ex = pd.DataFrame({c: y for c in CELLS_5X5})
    g = run_spec(SpecKind.THREE_FACTOR, ex, f)
    for k, v in (("b", 1.0), ("s", 1.3), ("h", 0.5), ("a", 0.0)):
        np.testing.assert_allclose(g.stats[k], v, atol=1e-12)
    gb = run_spec(SpecKind.SMB_HML_ONLY, ex, f)
    assert not gb.intercept and gb.coefficient_names() == ("s", "h")
    assert np.isnan(gb.stats["a"]).all() and np.isnan(gb.stats["b"]).all()
    gb2 = run_spec(SpecKind.SMB_HML_ONLY, ex, f, intercept=True)
    assert gb2.coefficient_names() == ("a", "s", "h")


def test_run_spec_matches_lstsq_and_nesting(rng):
    f = _factors(rng)
    ex = pd.DataFrame(rng.normal(0, 0.05, (len(f), 25)), index=f.index, columns=list(CELLS_5X5))
    ex = ex.add(0.9 * f.mkt_excess, axis=0)
    g = run_spec(SpecKind.THREE_FACTOR, ex, f)
    X = np.column_stack([np.ones(len(f)), f[["mkt_excess", "smb", "hml"]]])
    coef = np.linalg.lstsq(X, ex.to_numpy(), rcond=None)[0]
    np.testing.assert_allclose(g.stats["b"].ravel(), coef[1], rtol=1e-10)
    np.testing.assert_allclose(g.stats["h"].ravel(), coef[3], rtol=1e-10)
    ga = run_spec(SpecKind.MKT_ONLY, ex, f)
    assert (g.stats["r2"] >= ga.stats["r2"] - 1e-12).all()
    assert g.long("b").shape == (25, 3)


def test_insufficient_overlap(rng):
    f = _factors(rng, T=40)
    ex = pd.DataFrame(rng.normal(0, 0.05, (40, 25)), index=f.index, columns=list(CELLS_5X5))
    ex.iloc[:10, 3] = np.nan
    g = run_spec(SpecKind.MKT_ONLY, ex, f)
    assert np.isnan(g.stats["b"][0, 3]) and g.stats["n"][0, 0] == 40
    assert [d.code for d in g.diagnostics] == ["INSUFFICIENT_OVERLAP"]


def test_spread_tests_match_mean_t(rng):
    ex = pd.DataFrame(rng.normal(0.01, 0.05, (60, 25)), columns=list(CELLS_5X5))
    sp = spread_tests(ex)
    assert len(sp) == 10
    hml1 = next(s for s in sp if s.kind == "high_minus_low" and s.index == 1)
    ref = inference.mean_t_stat(ex["1/5"] - ex["1/1"])
    assert (hml1.mean, hml1.t) == (ref.mean, ref.t)
    bms3 = next(s for s in sp if s.kind == "big_minus_small" and s.index == 3)
    assert bms3.mean == pytest.approx((ex["5/3"] - ex["1/3"]).mean())


def test_grid_long_order():
    g = np.arange(25, dtype=float).reshape(5, 5)
    lg = grid_long(g)
    assert list(lg.iloc[6]) == [2, 2, 6.0]


@pytest.fixture(scope="module")
def ff3_study():
    m = generate_ff3_market(DgpConfig(n_securities=150, n_months=120))
    return m, run_ff3_study(m.panel)


def test_descriptive_shares_sum_to_one(ff3_study):
    _, st = ff3_study
    f = st.factors
    cap = f.cell_cap.to_numpy()
    share = cap / cap.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(share.sum(axis=1), 1.0, rtol=1e-12)
    d = descriptive_stats(f)
    assert d["share"].sum() == pytest.approx(1.0, rel=1e-12)
    assert d["count"].sum() == pytest.approx(150, rel=1e-12)


def test_grid_markdown_layout(ff3_study):
    _, st = ff3_study
    md = grid_markdown(st.grids[SpecKind.THREE_FACTOR])
    assert inference.LEGEND in md and "| **adj R^2** |" in md and "s(e) (%)" in md
    for nm in ("b", "s", "h"):
        assert f"| **{nm}** |" in md
    assert "| **a** |" not in md


def test_noiseless_ff3_exact(ff3_study):
    m, st = ff3_study
    g = st.grids[SpecKind.THREE_FACTOR]
    assert g.min_adj_r2() > 0.999999
