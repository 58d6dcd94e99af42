"""Time-series factor regressions on the 25 size / value portfolios.

Three specifications are fit cell by cell:

(a) ``R - RF = a + b (RM - RF) + e``
(b) ``R - RF = s SMB + h HML + e`` (no intercept unless requested)
(c) ``R - RF = a + b (RM - RF) + s SMB + h HML + e``

Grids are indexed (size quintile, BE/ME quintile), both ascending.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from . import inference
from .errors import Diagnostic, EngineError
from .factors import CELLS_5X5, FactorStudy, build_factor_study
from .panel import MonthKey, MonthlyPanel
from .parallel import ordered_map
from .regress import ols_fit

MIN_OVERLAP = 36
SIZE_LABELS = ("Small", "2", "3", "4", "Big")
BEME_LABELS = ("Low", "2", "3", "4", "High")


class SpecKind(str, enum.Enum):
    MKT_ONLY = "a"
    SMB_HML_ONLY = "b"
    THREE_FACTOR = "c"

    @property
    def regressors(self) -> tuple[str, ...]:
        return {
            SpecKind.MKT_ONLY: ("mkt_excess",),
            SpecKind.SMB_HML_ONLY: ("smb", "hml"),
            SpecKind.THREE_FACTOR: ("mkt_excess", "smb", "hml"),
        }[self]

    @property
    def default_intercept(self) -> bool:
        return self is not SpecKind.SMB_HML_ONLY


_COEF_NAME = {"mkt_excess": "b", "smb": "s", "hml": "h"}
GRID_STATS = ("a", "t_a", "b", "t_b", "s", "t_s", "h", "t_h", "r2", "adj_r2", "se", "n")


def _empty_grid() -> np.ndarray:
    return np.full((5, 5), np.nan)


@dataclass
class GridResult:
    spec: SpecKind
    intercept: bool
    stats: dict[str, np.ndarray]  # 5x5 per statistic in GRID_STATS
    first_month: MonthKey | None
    last_month: MonthKey | None
    n_months: int
    filtered: bool = False
    diagnostics: list[Diagnostic] = field(default_factory=list)

    def coefficient_names(self) -> tuple[str, ...]:
        names = tuple(_COEF_NAME[r] for r in self.spec.regressors)
        return (("a",) if self.intercept else ()) + names

    def frame(self, stat: str) -> pd.DataFrame:
        return pd.DataFrame(self.stats[stat], index=list(SIZE_LABELS), columns=list(BEME_LABELS))

    def long(self, stat: str) -> pd.DataFrame:
        return grid_long(self.stats[stat])

    def min_adj_r2(self) -> float:
        return float(np.nanmin(self.stats["adj_r2"]))


def grid_long(grid: np.ndarray) -> pd.DataFrame:
    """``size_q,beme_q,value`` rows, size outer, BE/ME inner, both 1-based."""
    recs = [(i + 1, j + 1, float(grid[i, j])) for i in range(5) for j in range(5)]
    return pd.DataFrame(recs, columns=["size_q", "beme_q", "value"])


def _cell(i: int) -> tuple[int, int]:
    return divmod(i, 5)


def run_spec(
    spec: SpecKind,
    portfolio_excess: pd.DataFrame,
    factors: pd.DataFrame,
    *,
    intercept: bool | None = None,
    min_overlap: int = MIN_OVERLAP,
    filtered: bool = False,
    jobs: int = 1,
) -> GridResult:
    """Fit ``spec`` separately for each of the 25 portfolios.

    Months where the portfolio or any regressor is missing are dropped for
    that portfolio only. A portfolio with fewer than ``min_overlap`` usable
    months is left as NaN and reported as INSUFFICIENT_OVERLAP.
    """
    spec = SpecKind(spec)
    if intercept is None:
        intercept = spec.default_intercept
    cols = list(CELLS_5X5)
    if list(portfolio_excess.columns) != cols:
        raise EngineError("DIMENSION_MISMATCH", "portfolio frame must have the 25 size/value cells as columns")
    fac = factors.reindex(portfolio_excess.index)
    Xf = fac[list(spec.regressors)].to_numpy(dtype=float)
    Y = portfolio_excess.to_numpy(dtype=float)

    def fit(j: int):
        y = Y[:, j]
        ok = np.isfinite(y) & np.all(np.isfinite(Xf), axis=1)
        n = int(ok.sum())
        if n < min_overlap:
            return j, None, Diagnostic("INSUFFICIENT_OVERLAP", "", None, None, detail=f"cell {cols[j]}: {n} months < {min_overlap}")
        X = Xf[ok]
        if intercept:
            X = np.column_stack([np.ones(n), X])
        try:
            return j, ols_fit(X, y[ok]), None
        except EngineError as exc:
            return j, None, Diagnostic(exc.code, "", None, None, detail=f"cell {cols[j]}: {exc}")

    stats = {k: _empty_grid() for k in GRID_STATS}
    diags = []
    names = (("a",) if intercept else ()) + tuple(_COEF_NAME[r] for r in spec.regressors)
    for j, res, diag in ordered_map(fit, range(25), jobs=jobs):
        if diag is not None:
            diags.append(diag)
            continue
        i, k = _cell(j)
        for pos, nm in enumerate(names):
            stats[nm][i, k] = res.coefficients[pos]
            stats[f"t_{nm}"][i, k] = res.t_stats[pos]
        stats["r2"][i, k] = res.r_squared
        stats["adj_r2"][i, k] = res.adj_r_squared
        stats["se"][i, k] = res.residual_sd
        stats["n"][i, k] = res.n_obs
    idx = portfolio_excess.index
    return GridResult(
        spec,
        intercept,
        stats,
        idx[0] if len(idx) else None,
        idx[-1] if len(idx) else None,
        len(idx),
        filtered,
        diags,
    )


# ---------------------------------------------------------------------------
# descriptive statistics and spreads


def descriptive_stats(study: FactorStudy) -> dict[str, np.ndarray]:
    """Time-averaged per-cell statistics over the study months.

    Returns 5x5 grids:

    ``market_value``
        mean over months of the average member market cap;
    ``count``
        mean number of members with a market cap;
    ``share``
        mean of the cell's share of total market cap (shares sum to 1 each month);
    ``beme``
        mean member BE/ME;
    ``excess_return``
        mean monthly value-weighted excess return.
    """
    cap = study.cell_cap.to_numpy(dtype=float)
    cnt = study.cell_count.to_numpy(dtype=float)
    with np.errstate(invalid="ignore", divide="ignore"):
        avg_cap = np.where(cnt > 0, cap / np.maximum(cnt, 1), np.nan)
        total = cap.sum(axis=1, keepdims=True)
        share = np.where(total > 0, cap / np.where(total > 0, total, 1.0), np.nan)

    def avg(a: np.ndarray) -> np.ndarray:
        out = np.full(a.shape[1], np.nan)
        for j in range(a.shape[1]):
            v = a[:, j][np.isfinite(a[:, j])]
            if v.size:
                out[j] = v.mean()
        return out.reshape(5, 5)

    return {
        "market_value": avg(avg_cap),
        "count": cnt.mean(axis=0).reshape(5, 5) if len(cnt) else _empty_grid(),
        "share": avg(share),
        "beme": avg(study.cell_beme.to_numpy(dtype=float)),
        "excess_return": avg(study.portfolio_excess().to_numpy(dtype=float)),
    }


@dataclass(frozen=True)
class SpreadTest:
    kind: str  # high_minus_low (per size row) or big_minus_small (per BE/ME column)
    index: int  # 1-based quintile of the fixed dimension
    mean: float
    sd: float
    t: float
    n: int

    @property
    def stars(self) -> str:
        return inference.stars(self.t)


def spread_tests(excess: pd.DataFrame) -> list[SpreadTest]:
    """High-minus-Low in each size row and Big-minus-Small in each BE/ME column."""
    Y = excess[list(CELLS_5X5)].to_numpy(dtype=float)
    out = []
    pairs = [("high_minus_low", q, q * 5 + 4, q * 5) for q in range(5)]
    pairs += [("big_minus_small", q, 20 + q, q) for q in range(5)]
    for kind, q, hi, lo in pairs:
        try:
            mt = inference.mean_t_stat(Y[:, hi] - Y[:, lo])
        except EngineError:
            raise EngineError("INSUFFICIENT_OVERLAP", f"{kind} {q + 1}: fewer than 2 months") from None
        out.append(SpreadTest(kind, q + 1, mt.mean, mt.sd, mt.t, mt.n))
    return out


def spreads_frame(tests: Sequence[SpreadTest]) -> pd.DataFrame:
    return pd.DataFrame(
        [(s.kind, s.index, s.mean, s.sd, s.t, s.n) for s in tests],
        columns=["spread", "quintile", "mean", "sd", "t", "n"],
    )


# ---------------------------------------------------------------------------
# studies


@dataclass
class FF3Study:
    factors: FactorStudy
    descriptive: dict[str, np.ndarray]
    spreads: list[SpreadTest]
    grids: dict[SpecKind, GridResult]
    diagnostics: list[Diagnostic]

    @property
    def filtered(self) -> bool:
        return self.factors.shell_fraction > 0


def run_ff3_study(
    panel: MonthlyPanel,
    *,
    shell_fraction: float = 0.0,
    size_source: str = "april",
    specs: Sequence[SpecKind] = tuple(SpecKind),
    intercept_b: bool = False,
    min_overlap: int = MIN_OVERLAP,
    jobs: int = 1,
) -> FF3Study:
    """Factors, descriptive statistics, spreads and regression grids.

    ``panel`` should already have the exclusion filters applied.
    """
    study = build_factor_study(panel, shell_fraction=shell_fraction, size_source=size_source, jobs=jobs)
    excess = study.portfolio_excess()
    grids = {}
    diags = list(study.diagnostics)
    for spec in specs:
        spec = SpecKind(spec)
        icpt = intercept_b if spec is SpecKind.SMB_HML_ONLY else True
        g = run_spec(spec, excess, study.factors, intercept=icpt, min_overlap=min_overlap, filtered=shell_fraction > 0, jobs=jobs)
        grids[spec] = g
        diags += g.diagnostics
    return FF3Study(study, descriptive_stats(study), spread_tests(excess), grids, diags)


@dataclass
class FilteredComparison:
    unfiltered: FF3Study
    filtered: FF3Study

    def min_adj_r2(self) -> tuple[float, float]:
        c = SpecKind.THREE_FACTOR
        return self.unfiltered.grids[c].min_adj_r2(), self.filtered.grids[c].min_adj_r2()


def run_filtered_study(panel: MonthlyPanel, fraction: float = 0.30, **kw) -> FilteredComparison:
    """Paired unfiltered and shell-filtered studies on the same panel."""
    return FilteredComparison(run_ff3_study(panel, **kw), run_ff3_study(panel, shell_fraction=fraction, **kw))


# ---------------------------------------------------------------------------
# rendering

SPEC_TITLES = {
    SpecKind.MKT_ONLY: "Regressions of 25 portfolio excess returns on RM - RF",
    SpecKind.SMB_HML_ONLY: "Regressions of 25 portfolio excess returns on SMB and HML",
    SpecKind.THREE_FACTOR: "Regressions of 25 portfolio excess returns on RM - RF, SMB and HML",
}


def model_line(spec: SpecKind, intercept: bool) -> str:
    terms = (["a"] if intercept else []) + [
        {"b": "b[RM(t) - RF(t)]", "s": "sSMB(t)", "h": "hHML(t)"}[_COEF_NAME[r]] for r in spec.regressors
    ]
    return "R(t) - RF(t) = " + " + ".join(terms + ["e(t)"])


def _fmt(v: float, digits: int, *, pct: bool = False, t: float | None = None) -> str:
    if not math.isfinite(v):
        return inference.format_t(v) if not math.isnan(v) else "NA"
    s = f"{v * 100 if pct else v:.{digits}f}"
    return s + (inference.stars(t) if t is not None else "")


def _panel_rows(left: Sequence[str], right: Sequence[str] | None, title_l: str, title_r: str | None) -> list[str]:
    # title sits in the Size column; the right title over the right panel's first column
    head = f"| **{title_l}** |" + " |" * 5 + (f" **{title_r}** |" + " |" * 4 if right is not None else "")
    lines = [head]
    for i, size in enumerate(SIZE_LABELS):
        cells = list(left[i * 5 : i * 5 + 5]) + (list(right[i * 5 : i * 5 + 5]) if right is not None else [])
        lines.append(f"| {size} | " + " | ".join(cells) + " |")
    return lines


def _grid_header(two: bool) -> list[str]:
    cols = list(BEME_LABELS) * (2 if two else 1)
    n = len(cols)
    return ["| Size | " + " | ".join(cols) + " |", "|---|" + "---:|" * n]


def _footer() -> list[str]:
    return ["", inference.LEGEND, "", inference.FAT_TAIL_NOTE, ""]


def _header(title: str, sub: str | None, window: str) -> list[str]:
    out = [f"# {title}", "", window, ""]
    if sub:
        out += [sub, ""]
    return out


def _window_text(first: MonthKey | None, last: MonthKey | None, n: int) -> str:
    if first is None:
        return "(no months)"
    return f"({first} to {last}, {n} months)"


def grid_markdown(grid: GridResult, title: str | None = None) -> str:
    """Two-panel blocks: slope | t(slope) for each factor, then adj R^2 | s(e).

    The intercept is reported in the CSV outputs only. s(e) is shown in
    percent.
    """
    title = title or SPEC_TITLES[grid.spec] + (" (shell-filtered)" if grid.filtered else "")
    lines = _header(title, model_line(grid.spec, grid.intercept), _window_text(grid.first_month, grid.last_month, grid.n_months))
    lines += _grid_header(True)
    st = grid.stats
    for nm in grid.coefficient_names():
        if nm == "a":
            continue
        coef = [_fmt(st[nm].flat[j], 2, t=st[f"t_{nm}"].flat[j]) for j in range(25)]
        tval = [inference.format_t(st[f"t_{nm}"].flat[j]) for j in range(25)]
        lines += _panel_rows(coef, tval, nm, f"t({nm})")
    adj = [_fmt(st["adj_r2"].flat[j], 2) for j in range(25)]
    se = [_fmt(st["se"].flat[j], 2, pct=True) for j in range(25)]
    lines += _panel_rows(adj, se, "adj R^2", "s(e) (%)")
    return "\n".join(lines + _footer())


def descriptive_markdown(desc: Mapping[str, np.ndarray], first, last, n: int) -> str:
    lines = _header("Descriptive statistics of the 25 size / BE/ME portfolios", None, _window_text(first, last, n))
    lines += _grid_header(True)
    mv = [_fmt(v, 1) for v in desc["market_value"].flat]
    be = [_fmt(v, 2) for v in desc["beme"].flat]
    sh = [_fmt(v, 4) for v in desc["share"].flat]
    ct = [_fmt(v, 1) for v in desc["count"].flat]
    lines += _panel_rows(mv, be, "mean market value", "mean BE/ME")
    lines += _panel_rows(sh, ct, "mean market-value share", "mean number of firms")
    return "\n".join(lines + [""])


def excess_return_markdown(desc: Mapping[str, np.ndarray], spreads: Sequence[SpreadTest], first, last, n: int, *, filtered: bool = False) -> str:
    """Mean monthly excess returns (percent) with High-Low and Big-Small margins."""
    title = "Mean monthly excess returns of the 25 size / BE/ME portfolios (%)"
    if filtered:
        title += " (shell-filtered)"
    lines = _header(title, None, _window_text(first, last, n))
    lines += ["| Size | " + " | ".join(BEME_LABELS) + " | High-Low |", "|---|" + "---:|" * 6]
    hml = {s.index: s for s in spreads if s.kind == "high_minus_low"}
    bms = {s.index: s for s in spreads if s.kind == "big_minus_small"}
    er = desc["excess_return"]
    for i, size in enumerate(SIZE_LABELS):
        sp = hml[i + 1]
        cells = [_fmt(er[i, j], 2, pct=True) for j in range(5)] + [_fmt(sp.mean, 3, pct=True, t=sp.t)]
        lines.append(f"| {size} | " + " | ".join(cells) + " |")
    cells = [_fmt(bms[j + 1].mean, 3, pct=True, t=bms[j + 1].t) for j in range(5)]
    lines.append("| Big-Small | " + " | ".join(cells) + " | |")
    return "\n".join(lines + _footer())
