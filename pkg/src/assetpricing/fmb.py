"""Fama-MacBeth test of the standard CAPM with yearly rolling portfolio betas.

Pipeline per period scheme:

1. estimate each security's beta over the formation years and split the
   universe into 20 beta-ranked portfolios (ascending);
2. for testing year y, re-estimate member betas and residual s.d. on the
   window from the start of the initial estimation period to the end of
   year y-1, and average them within portfolios;
3. regress each month's 20 portfolio mean returns on the frozen yearly
   regressors (variants A-D), then average the monthly coefficients.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from . import inference, kernels
from .errors import Diagnostic, EngineError
from .panel import MonthKey, MonthlyPanel, continuous_listing_subset
from .parallel import ordered_map
from .regress import DEFAULT_MIN_OBS, ols_fit

log = logging.getLogger(__name__)

VARIANTS: dict[str, tuple[str, ...]] = {
    "A": ("beta_lag",),
    "B": ("beta_lag", "beta_sq_lag"),
    "C": ("beta_lag", "s_lag"),
    "D": ("beta_lag", "beta_sq_lag", "s_lag"),
}
_GAMMA_OF = {"beta_lag": 1, "beta_sq_lag": 2, "s_lag": 3}
GAMMA_COLS = ("g0", "g1", "g2", "g3")
ZERO_TOL = 1e-12


@dataclass(frozen=True)
class PeriodScheme:
    formation: tuple[int, int]
    initial_estimation: tuple[int, int]
    testing: tuple[int, int]

    def __post_init__(self):
        for name in ("formation", "initial_estimation", "testing"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise EngineError("INVALID_CONFIG", f"{name} range {lo}-{hi} is reversed")
        if self.formation[1] + 1 != self.initial_estimation[0] or self.initial_estimation[1] + 1 != self.testing[0]:
            raise EngineError("INVALID_CONFIG", f"scheme ranges must be contiguous and ordered: {self}")

    @property
    def testing_years(self) -> list[int]:
        return list(range(self.testing[0], self.testing[1] + 1))

    @property
    def label(self) -> str:
        return f"{self.testing[0]}-{self.testing[1]}"

    @property
    def first_month(self) -> MonthKey:
        return MonthKey(self.formation[0], 1)

    @property
    def last_month(self) -> MonthKey:
        return MonthKey(self.testing[1], 12)

    def formation_window(self) -> tuple[MonthKey, MonthKey]:
        return MonthKey(self.formation[0], 1), MonthKey(self.formation[1], 12)

    def estimation_window(self, testing_year: int) -> tuple[MonthKey, MonthKey]:
        """Window used for the regressors of ``testing_year``: grows by a year each year."""
        if testing_year not in self.testing_years:
            raise EngineError("WINDOW_OUT_OF_SPAN", f"{testing_year} is not a testing year of {self.label}")
        return MonthKey(self.initial_estimation[0], 1), MonthKey(testing_year - 1, 12)

    def __str__(self) -> str:
        f, e, t = self.formation, self.initial_estimation, self.testing
        return f"{f[0]}-{f[1]}:{e[0]}-{e[1]}:{t[0]}-{t[1]}"

    @classmethod
    def parse(cls, text: str) -> "PeriodScheme":
        try:
            parts = [tuple(int(y) for y in p.strip().split("-")) for p in text.strip().split(":")]
            if len(parts) != 3 or any(len(p) != 2 for p in parts):
                raise ValueError
        except ValueError:
            raise EngineError("INVALID_CONFIG", f"bad scheme {text!r}; expected Y-Y:Y-Y:Y-Y") from None
        return cls(*parts)  # type: ignore[arg-type]


DEFAULT_SCHEMES = (
    PeriodScheme((2000, 2003), (2004, 2008), (2009, 2012)),
    PeriodScheme((2001, 2007), (2008, 2012), (2013, 2016)),
    PeriodScheme((2005, 2011), (2012, 2016), (2017, 2019)),
)


# ---------------------------------------------------------------------------
# portfolio formation


@dataclass(frozen=True)
class BetaPortfolioSet:
    assignments: Mapping[str, int]
    sizes: tuple[int, ...]
    formation_betas: Mapping[str, float] = field(default_factory=dict)

    @property
    def n_groups(self) -> int:
        return len(self.sizes)

    def members(self, p: int) -> list[str]:
        """Ids in portfolio ``p`` (1 = lowest beta), sorted."""
        return sorted(s for s, g in self.assignments.items() if g == p)


def remainder_order(n_groups: int) -> list[int]:
    """Portfolio indices (1-based) that receive the leftover securities, in order.

    Each pair of mirror portfolios, starting from the extremes, takes two
    rounds: 1, G, 1, G, 2, G-1, 2, G-1, ... With 724 securities in 20
    groups this gives 38, 36, ..., 36, 38.
    """
    order: list[int] = []
    lo, hi = 1, n_groups
    while lo < hi:
        order += [lo, hi, lo, hi]
        lo, hi = lo + 1, hi - 1
    if lo == hi:
        order += [lo]
    return order


def group_sizes(n: int, n_groups: int) -> list[int]:
    q, r = divmod(n, n_groups)
    sizes = [q] * n_groups
    for p in remainder_order(n_groups)[:r]:
        sizes[p - 1] += 1
    return sizes


def form_beta_portfolios(betas: Mapping[str, float], n_groups: int = 20) -> BetaPortfolioSet:
    """Sort securities by beta (ties by id) and cut into ``n_groups`` portfolios.

    Portfolio 1 holds the lowest betas.
    """
    items = [(float(b), s) for s, b in betas.items()]
    if any(not math.isfinite(b) for b, _ in items):
        raise EngineError("NON_FINITE", "formation betas must be finite")
    if len(items) < n_groups:
        raise EngineError("TOO_FEW_SECURITIES", f"{len(items)} securities for {n_groups} groups")
    items.sort()
    sizes = group_sizes(len(items), n_groups)
    assignments: dict[str, int] = {}
    pos = 0
    for p, size in enumerate(sizes, start=1):
        for _, sid in items[pos : pos + size]:
            assignments[sid] = p
        pos += size
    return BetaPortfolioSet(assignments, tuple(sizes), {s: b for b, s in items})


# ---------------------------------------------------------------------------
# rolling estimation


@dataclass
class RollingEstimates:
    scheme: PeriodScheme
    years: list[int]
    beta: np.ndarray  # (years, G)
    beta_sq: np.ndarray
    s: np.ndarray
    months: list[MonthKey]
    returns: np.ndarray  # (months, G) equal-weighted member means
    window_months: list[int]
    diagnostics: list[Diagnostic] = field(default_factory=list)

    def cross_section_table(self) -> pd.DataFrame:
        """Long table: one row per (portfolio, month) with lagged regressors."""
        G = self.returns.shape[1]
        recs = []
        yidx = {y: i for i, y in enumerate(self.years)}
        for p in range(G):
            for t, mk in enumerate(self.months):
                j = yidx[mk.year]
                recs.append(
                    (p + 1, mk.year, mk.month, self.returns[t, p], self.beta[j, p], self.beta_sq[j, p], self.s[j, p])
                )
        return pd.DataFrame(recs, columns=["portfolio", "year", "month", "mean_return", "beta_lag", "beta_sq_lag", "s_lag"])

    def month_rows(self, t: int) -> pd.DataFrame:
        j = self.years.index(self.months[t].year)
        return pd.DataFrame(
            {
                "mean_return": self.returns[t],
                "beta_lag": self.beta[j],
                "beta_sq_lag": self.beta_sq[j],
                "s_lag": self.s[j],
            },
            index=pd.RangeIndex(1, self.returns.shape[1] + 1, name="portfolio"),
        )


def _check_span(panel: MonthlyPanel, first: MonthKey, last: MonthKey):
    if not (panel.contains(first) and panel.contains(last)):
        span = panel.span
        raise EngineError("WINDOW_OUT_OF_SPAN", f"window {first}..{last} not inside panel span {span}")


def _member_rows(panel: MonthlyPanel, portfolios: BetaPortfolioSet):
    groups = np.full(panel.n_securities, -1, dtype=np.int64)
    for sid, p in portfolios.assignments.items():
        groups[panel.security_index(sid)] = p - 1
    rows = np.nonzero(groups >= 0)[0]
    return rows, groups[rows]


def _group_means(values: np.ndarray, groups: np.ndarray, n_groups: int) -> np.ndarray:
    """Mean of finite ``values`` within each group; NaN for groups with none."""
    ok = np.isfinite(values)
    sums = np.bincount(groups[ok], weights=values[ok], minlength=n_groups)
    cnt = np.bincount(groups[ok], minlength=n_groups)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(cnt > 0, sums / np.maximum(cnt, 1), np.nan)


def rolling_estimates(
    panel: MonthlyPanel,
    market: np.ndarray,
    scheme: PeriodScheme,
    portfolios: BetaPortfolioSet,
    *,
    min_obs: int = DEFAULT_MIN_OBS,
) -> RollingEstimates:
    """Yearly portfolio regressors and monthly portfolio returns for one scheme.

    For testing year y the member market-model regressions use every month
    from January of the first initial-estimation year to December of y-1.
    Portfolio beta, mean squared beta and mean residual s.d. are
    equal-weighted over members with an estimate; monthly portfolio returns
    are equal-weighted over members with a return that month.
    """
    _check_span(panel, scheme.first_month, scheme.last_month)
    market = np.asarray(market, dtype=float)
    G = portfolios.n_groups
    rows, groups = _member_rows(panel, portfolios)
    R = panel.returns[rows]
    diags: list[Diagnostic] = []

    years = scheme.testing_years
    beta = np.full((len(years), G), np.nan)
    beta_sq = np.full((len(years), G), np.nan)
    s = np.full((len(years), G), np.nan)
    window_months = []
    for j, y in enumerate(years):
        lo, hi = scheme.estimation_window(y)
        t0, t1 = panel.month_index(lo), panel.month_index(hi)
        window_months.append(t1 - t0 + 1)
        b, _, sd, _ = kernels.market_model_batch(R[:, t0 : t1 + 1], market[t0 : t1 + 1], min_obs)
        for k in np.nonzero(~np.isfinite(b))[0]:
            diags.append(
                Diagnostic("TOO_FEW_OBS", panel.security_ids[rows[k]], y, None, detail=f"no estimate on {lo}..{hi}; left out of portfolio means")
            )
        beta[j] = _group_means(b, groups, G)
        beta_sq[j] = _group_means(b * b, groups, G)
        s[j] = _group_means(sd, groups, G)

    t0 = panel.month_index(MonthKey(years[0], 1))
    t1 = panel.month_index(MonthKey(years[-1], 12))
    months = list(panel.months[t0 : t1 + 1])
    ret = np.full((len(months), G), np.nan)
    for k, t in enumerate(range(t0, t1 + 1)):
        ret[k] = _group_means(R[:, t], groups, G)
    return RollingEstimates(scheme, years, beta, beta_sq, s, months, ret, window_months, diags)


# ---------------------------------------------------------------------------
# cross-sections and aggregation


@dataclass(frozen=True)
class CrossSection:
    gammas: np.ndarray  # length 4; NaN for regressors outside the variant
    r_squared: float


def cross_section_month(rows: pd.DataFrame, variant: str) -> CrossSection:
    """OLS of portfolio mean returns on the variant's lagged regressors."""
    if variant not in VARIANTS:
        raise EngineError("INVALID_CONFIG", f"unknown variant {variant!r}")
    cols = VARIANTS[variant]
    X = np.column_stack([np.ones(len(rows))] + [rows[c].to_numpy(dtype=float) for c in cols])
    res = ols_fit(X, rows["mean_return"].to_numpy(dtype=float))
    g = np.full(4, np.nan)
    g[0] = res.coefficients[0]
    for c, coef in zip(cols, res.coefficients[1:]):
        g[_GAMMA_OF[c]] = coef
    return CrossSection(g, res.r_squared)


def run_cross_sections(
    est: RollingEstimates, variant: str, rf: np.ndarray, *, jobs: int = 1
) -> tuple[pd.DataFrame, list[Diagnostic]]:
    """Monthly gamma series for one variant. ``rf`` is aligned with ``est.months``."""
    diags: list[Diagnostic] = []
    usable = []
    for t, mk in enumerate(est.months):
        rows = est.month_rows(t)
        needed = ["mean_return", *VARIANTS[variant]]
        if not np.all(np.isfinite(rows[needed].to_numpy())):
            diags.append(Diagnostic("MONTH_SKIPPED", "", mk.year, mk.month, detail=f"variant {variant}: a portfolio lacks a return or regressor"))
            log.info("skipping %s variant %s: incomplete cross-section", mk, variant)
            continue
        usable.append((t, rows))

    def fit(item):
        t, rows = item
        try:
            return cross_section_month(rows, variant)
        except EngineError as exc:
            return exc

    results = ordered_map(fit, usable, jobs=jobs)
    recs, index = [], []
    for (t, _), cs in zip(usable, results):
        mk = est.months[t]
        if isinstance(cs, EngineError):
            diags.append(Diagnostic(cs.code, "", mk.year, mk.month, detail=f"variant {variant}: {cs}"))
            continue
        recs.append([*cs.gammas, cs.r_squared, rf[t]])
        index.append(mk)
    frame = pd.DataFrame(recs, columns=[*GAMMA_COLS, "r2", "rf"], index=pd.Index(index, name="month"), dtype=float)
    return frame, diags


@dataclass(frozen=True)
class GammaSummary:
    n: int
    tests: Mapping[str, inference.MeanTest]  # keys: g0, g0_minus_rf, g1, g2, g3 (present ones)
    mean_r2: float


def aggregate_gammas(series: pd.DataFrame, rf=None) -> GammaSummary:
    """Average monthly coefficients; t = mean / (sd / sqrt(n)).

    The intercept is also tested net of the risk-free rate (g0 - rf), using
    ``rf`` if given, else the series' ``rf`` column.
    """
    if len(series) == 0:
        raise EngineError("EMPTY_SERIES", "no monthly cross-sections")
    if len(series) < 2:
        raise EngineError("EMPTY_SERIES", "need at least two months")
    tests: dict[str, inference.MeanTest] = {}
    for c in GAMMA_COLS:
        if c in series and series[c].notna().any():
            tests[c] = inference.mean_t_stat(series[c].to_numpy())
    if "g0" in tests:
        rf_arr = np.asarray(series["rf"] if rf is None else rf, dtype=float)
        tests["g0_minus_rf"] = inference.mean_t_stat(series["g0"].to_numpy() - rf_arr)
    r2 = float(series["r2"].mean()) if "r2" in series else math.nan
    return GammaSummary(len(series), tests, r2)


@dataclass(frozen=True)
class ReportRow:
    variant: str
    window: str
    summary: GammaSummary


HYPOTHESES = {
    # name: (statistic key, variants providing it, one-sided)
    "H1": ("g2", ("B", "D"), False),
    "H2": ("g3", ("C", "D"), False),
    "H3": ("g1", ("A", "B", "C", "D"), True),
    "H4": ("g0_minus_rf", ("A", "B", "C", "D"), False),
}
HYPOTHESIS_TEXT = {
    "H1": "linearity: E(g2) = 0",
    "H2": "beta is the complete risk measure: E(g3) = 0",
    "H3": "positive risk premium: E(g1) > 0 (tests g1 = 0 against g1 > 0)",
    "H4": "Sharpe-Lintner: E(g0) = Rf",
}


def hypothesis_verdicts(
    rows: Sequence[ReportRow],
    alphas: Sequence[float] = (0.10, 0.05, 0.01),
    *,
    hypotheses: Sequence[str] = ("H1", "H2", "H3", "H4"),
    zero_tol: float = ZERO_TOL,
) -> pd.DataFrame:
    """Reject / fail-to-reject decisions per hypothesis, variant, window and level.

    H1, H2 and H4 are two-sided tests of a zero mean. H3 is one-sided: a
    rejection of g1 = 0 in favour of g1 > 0 supports the hypothesis.
    Means within ``zero_tol`` of zero (rounding noise in exact synthetic
    data) are never rejected.
    """
    present = {r.variant for r in rows}
    recs = []
    for h in hypotheses:
        key, providers, one_sided = HYPOTHESES[h]
        if not present.intersection(providers):
            raise EngineError("MISSING_VARIANT", f"{h} needs one of variants {providers}")
        for r in rows:
            if r.variant not in providers or key not in r.summary.tests:
                continue
            mt = r.summary.tests[key]
            for a in alphas:
                crit = inference.critical_value(a, one_sided=one_sided)
                if abs(mt.mean) <= zero_tol or math.isnan(mt.t):
                    reject = False
                elif one_sided:
                    reject = mt.t > crit
                else:
                    reject = abs(mt.t) > crit
                recs.append(
                    dict(
                        hypothesis=h,
                        variant=r.variant,
                        window=r.window,
                        statistic=key,
                        estimate=mt.mean,
                        t=mt.t,
                        alpha=a,
                        critical=crit,
                        decision="reject" if reject else "fail_to_reject",
                        supports_hypothesis=(reject if one_sided else not reject),
                    )
                )
    return pd.DataFrame(recs)


# ---------------------------------------------------------------------------
# full pipeline


@dataclass
class SchemeRun:
    scheme: PeriodScheme
    portfolios: BetaPortfolioSet
    estimates: RollingEstimates
    gammas: dict[str, pd.DataFrame]


@dataclass
class FMBResult:
    runs: list[SchemeRun]
    rows: list[ReportRow]
    gammas: dict[tuple[str, str], pd.DataFrame]
    verdicts: pd.DataFrame
    diagnostics: list[Diagnostic]
    universe: list[str]

    @property
    def windows(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r.window not in seen:
                seen.append(r.window)
        return seen


def formation_betas(panel: MonthlyPanel, market: np.ndarray, universe: Sequence[str], scheme: PeriodScheme, min_obs: int):
    lo, hi = scheme.formation_window()
    t0, t1 = panel.month_index(lo), panel.month_index(hi)
    rows = np.array([panel.security_index(s) for s in universe], dtype=np.int64)
    b, _, _, _ = kernels.market_model_batch(panel.returns[rows, t0 : t1 + 1], market[t0 : t1 + 1], min_obs)
    betas, diags = {}, []
    for sid, v in zip(universe, b):
        if np.isfinite(v):
            betas[sid] = float(v)
        else:
            diags.append(Diagnostic("TOO_FEW_OBS", sid, scheme.formation[0], None, detail=f"no formation beta on {lo}..{hi}"))
    return betas, diags


def run_fmb(
    panel: MonthlyPanel,
    market,
    schemes: Sequence[PeriodScheme] = DEFAULT_SCHEMES,
    *,
    variants: Sequence[str] = ("A", "B", "C", "D"),
    n_groups: int = 20,
    min_obs: int = DEFAULT_MIN_OBS,
    universe: Sequence[str] | None = None,
    alphas: Sequence[float] = (0.10, 0.05, 0.01),
    jobs: int = 1,
) -> FMBResult:
    """Run every scheme and variant, plus a pooled window over all testing months.

    ``market`` is the external index return series aligned with the panel.
    The default universe is every security continuously listed (observed at
    least once per calendar year) from the first formation year to the last
    testing year.
    """
    if not schemes:
        raise EngineError("INVALID_CONFIG", "no period schemes")
    for v in variants:
        if v not in VARIANTS:
            raise EngineError("INVALID_CONFIG", f"unknown variant {v!r}")
    market = np.asarray(market, dtype=float)
    if market.shape != (panel.n_months,):
        raise EngineError("DIMENSION_MISMATCH", "market series must align with panel months")
    first = min(s.first_month for s in schemes)
    last = max(s.last_month for s in schemes)
    _check_span(panel, first, last)
    if universe is None:
        universe = continuous_listing_subset(panel, (first, last))
    diags: list[Diagnostic] = []
    rf_all = panel.risk_free

    runs: list[SchemeRun] = []
    for scheme in schemes:
        betas, d = formation_betas(panel, market, universe, scheme, min_obs)
        diags += d
        ports = form_beta_portfolios(betas, n_groups)
        est = rolling_estimates(panel, market, scheme, ports, min_obs=min_obs)
        diags += est.diagnostics
        t0 = panel.month_index(est.months[0])
        rf = rf_all[t0 : t0 + len(est.months)]
        gam = {}
        for v in variants:
            g, d = run_cross_sections(est, v, rf, jobs=jobs)
            gam[v] = g
            diags += d
        runs.append(SchemeRun(scheme, ports, est, gam))

    windows: list[tuple[str, list[SchemeRun]]] = []
    if len(runs) > 1:
        pooled = f"{min(s.testing[0] for s in schemes)}-{max(s.testing[1] for s in schemes)}"
        windows.append((pooled, runs))
    windows += [(r.scheme.label, [r]) for r in runs]

    rows: list[ReportRow] = []
    gammas: dict[tuple[str, str], pd.DataFrame] = {}
    for v in variants:
        for label, members in windows:
            series = pd.concat([m.gammas[v] for m in members])
            gammas[(v, label)] = series
            rows.append(ReportRow(v, label, aggregate_gammas(series)))
    verdict_h = [h for h, (_, prov, _) in HYPOTHESES.items() if set(prov) & set(variants)]
    verdicts = hypothesis_verdicts(rows, alphas, hypotheses=verdict_h)
    return FMBResult(runs, rows, gammas, verdicts, diags, list(universe))


# ---------------------------------------------------------------------------
# reporting

TABLE3_STATS = (
    ("g0_minus_rf", "mean(g0-Rf)"),
    ("g1", "mean(g1)"),
    ("g2", "mean(g2)"),
    ("g3", "mean(g3)"),
)


def table3_frame(rows: Sequence[ReportRow]) -> pd.DataFrame:
    """Group x window rows of mean gammas, t-statistics and mean R^2 (decimal units)."""
    recs = []
    for r in rows:
        rec = {"group": r.variant, "window": r.window, "n_months": r.summary.n}
        for key, _ in TABLE3_STATS:
            mt = r.summary.tests.get(key) if (key == "g0_minus_rf" or _in_variant(key, r.variant)) else None
            rec[key] = mt.mean if mt else math.nan
            rec[f"t_{key}"] = mt.t if mt else math.nan
        rec["r2"] = r.summary.mean_r2
        recs.append(rec)
    return pd.DataFrame(recs)


def gamma_summary_frame(rows: Sequence[ReportRow]) -> pd.DataFrame:
    recs = []
    for r in rows:
        for key, mt in r.summary.tests.items():
            recs.append(dict(group=r.variant, window=r.window, statistic=key, mean=mt.mean, sd=mt.sd, t=mt.t, n=mt.n))
    return pd.DataFrame(recs)


def _in_variant(key: str, variant: str) -> bool:
    if key == "g1":
        return True
    col = {"g2": "beta_sq_lag", "g3": "s_lag"}[key]
    return col in VARIANTS[variant]


def _num(v: float, digits: int) -> str:
    if math.isnan(v):
        return ""
    s = f"{v:.{digits}f}"
    # leading zero dropped: .0107, -.0071
    return s.replace("0.", ".", 1) if s.startswith(("0.", "-0.")) else s


def table3_markdown(rows: Sequence[ReportRow]) -> str:
    head = ["Window"]
    for _, name in TABLE3_STATS:
        head += [name, f"t({name[5:-1]})"]
    head.append("R^2")
    lines = [
        "# Fama-MacBeth cross-sectional estimates",
        "",
        "R_pm = g0 + g1 * beta_p,y-1 + g2 * beta_p,y-1^2 + g3 * s_p,y-1 + eta_pm",
        "",
        "| " + " | ".join(head) + " |",
        "|" + "---|" * len(head),
    ]
    frame = table3_frame(rows)
    for g in dict.fromkeys(frame["group"]):
        lines.append("| **Group " + g + "** |" + " |" * (len(head) - 1))
        for _, rec in frame[frame["group"] == g].iterrows():
            cells = [rec["window"]]
            for key, _ in TABLE3_STATS:
                m, t = rec[key], rec[f"t_{key}"]
                if math.isnan(m):
                    cells += ["", ""]
                else:
                    # no stars on rounding noise, matching the verdict rule
                    mark = "" if abs(m) <= ZERO_TOL else inference.stars(t)
                    cells += [_num(m, 4) + mark, inference.format_t(t)]
            cells.append(_num(rec["r2"], 2))
            lines.append("| " + " | ".join(cells) + " |")
    lines += ["", inference.LEGEND, "", inference.FAT_TAIL_NOTE, ""]
    return "\n".join(lines)
