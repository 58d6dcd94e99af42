import numpy as np
import pytest

from assetpricing.panel import MonthKey, MonthlyPanel, SecurityFundamentals, Status


def make_panel(
    returns,
    *,
    start=MonthKey(2000, 1),
    market_cap=None,
    float_cap=None,
    status=None,
    rf_annual=0.0,
    fundamentals=(),
    ids=None,
    compounding="geometric",
):
    """Small in-memory panel; NaN returns mark absent rows."""
    R = np.asarray(returns, dtype=float)
    S, T = R.shape
    ids = tuple(ids) if ids is not None else tuple(f"A{i:03d}" for i in range(S))
    has_row = np.isfinite(R)
    cap = np.ones((S, T)) if market_cap is None else np.asarray(market_cap, dtype=float)
    fcap = cap.copy() if float_cap is None else np.asarray(float_cap, dtype=float)
    st = np.full((S, T), int(Status.NORMAL), dtype=np.int8) if status is None else np.asarray(status, dtype=np.int8)
    st = np.where(has_row, st, int(Status.MISSING)).astype(np.int8)
    return MonthlyPanel(
        security_ids=ids,
        months=tuple(start + k for k in range(T)),
        returns=R,
        market_cap=np.where(has_row, cap, np.nan),
        float_cap=np.where(has_row, fcap, np.nan),
        status=st,
        has_row=has_row,
        rf_annual=np.full(T, float(rf_annual)),
        fundamentals={(f.security_id, f.fiscal_year): f for f in fundamentals},
        rf_compounding=compounding,
    )


def fund(sid, fy, be, mv, fin=False):
    return SecurityFundamentals(sid, fy, float(be), float(mv), fin)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        ok, text = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'} - {text}")
