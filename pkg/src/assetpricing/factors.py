"""Size / book-to-market sorts and the market, SMB and HML factors.

Portfolios are formed once a year at the end of April and held from May
to the following April. Breakpoints use a rank rule: the breakpoint for
fraction q of N sorted values is the value at rank ceil(q*N), and a value
equal to a breakpoint falls in the lower group. Cell returns are
float-cap weighted with the cap at the end of the previous month.
"""
from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from . import kernels
from .errors import Diagnostic, EngineError
from .panel import MonthKey, MonthlyPanel, fiscal_align, formation_window
from .parallel import ordered_map

log = logging.getLogger(__name__)

SIZE_SOURCES = ("april", "fiscal")
CELLS_2X3 = ("S/L", "S/M", "S/H", "B/L", "B/M", "B/H")
CELLS_5X5 = tuple(f"{i}/{j}" for i in range(1, 6) for j in range(1, 6))


class SortScheme(str, enum.Enum):
    TWO_BY_THREE = "2x3"
    FIVE_BY_FIVE = "5x5"


@dataclass(frozen=True)
class FormationSnapshot:
    formation_year: int
    security_ids: tuple[str, ...]
    size: np.ndarray
    beme: np.ndarray
    diagnostics: tuple[Diagnostic, ...] = ()

    def __len__(self) -> int:
        return len(self.security_ids)

    def subset(self, keep: np.ndarray) -> "FormationSnapshot":
        keep = np.asarray(keep, dtype=bool)
        return FormationSnapshot(
            self.formation_year,
            tuple(s for s, k in zip(self.security_ids, keep) if k),
            self.size[keep],
            self.beme[keep],
            self.diagnostics,
        )


@dataclass(frozen=True)
class CellAssignment:
    scheme: SortScheme
    formation_year: int
    security_ids: tuple[str, ...]
    codes: np.ndarray  # index into CELLS_2X3 / CELLS_5X5, aligned with security_ids

    @property
    def labels(self) -> tuple[str, ...]:
        return CELLS_2X3 if self.scheme is SortScheme.TWO_BY_THREE else CELLS_5X5

    def mapping(self) -> dict[str, str]:
        lab = self.labels
        return {s: lab[c] for s, c in zip(self.security_ids, self.codes)}

    def members(self, label: str) -> list[str]:
        code = self.labels.index(label)
        return [s for s, c in zip(self.security_ids, self.codes) if c == code]


def _exact_fraction(q: float) -> Fraction:
    return Fraction(q).limit_denominator(1_000_000)


def breakpoint(values, q: float) -> float:
    """Value at rank ceil(q * N) of the ascending sort (rank at least 1)."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise EngineError("EMPTY_SNAPSHOT", "no values for breakpoint")
    rank = max(math.ceil(_exact_fraction(q) * v.size), 1)
    return float(v[min(rank, v.size) - 1])


def build_snapshot(panel: MonthlyPanel, year: int, *, size_source: str = "april") -> FormationSnapshot:
    """Sorting variables for formation year ``year`` (held May ``year`` .. April ``year+1``).

    BE/ME is fiscal ``year-1`` book equity over fiscal ``year-1`` year-end
    market value. Size is the April ``year`` market cap from the panel
    (``size_source="april"``) or the fiscal ``year-1`` market value
    (``"fiscal"``). Securities without the needed data are dropped and
    reported.
    """
    if size_source not in SIZE_SOURCES:
        raise EngineError("INVALID_CONFIG", f"size_source must be one of {SIZE_SOURCES}")
    may, _ = formation_window(year)
    april = MonthKey(year, 4)
    if not panel.contains(may):
        raise EngineError("WINDOW_OUT_OF_SPAN", f"formation year {year} starts outside the panel span")
    values, diags = fiscal_align(panel, may)
    t_apr = panel.month_index(april) if panel.contains(april) else None
    sids, sizes, bemes = [], [], []
    for sid in sorted(values):
        fv = values[sid]
        if fv.book_equity <= 0:
            diags.append(Diagnostic("NONPOSITIVE_BOOK_EQUITY", sid, year - 1, None, detail="excluded from sorts"))
            continue
        if size_source == "april":
            cap = math.nan if t_apr is None else float(panel.market_cap[panel.security_index(sid), t_apr])
            if not (math.isfinite(cap) and cap > 0):
                diags.append(Diagnostic("NO_APRIL_CAP", sid, year, 4, detail="no April market cap; excluded from sorts"))
                continue
        else:
            cap = fv.market_value
        sids.append(sid)
        sizes.append(cap)
        bemes.append(fv.book_equity / fv.market_value)
    if not sids:
        raise EngineError("EMPTY_SNAPSHOT", f"no sortable securities for formation year {year}")
    return FormationSnapshot(year, tuple(sids), np.array(sizes), np.array(bemes), tuple(diags))


def shell_filter(snapshot: FormationSnapshot, fraction: float = 0.30) -> FormationSnapshot:
    """Drop the floor(fraction * N) smallest securities by size (ties by id)."""
    if not 0.0 <= fraction < 1.0:
        raise EngineError("INVALID_CONFIG", f"shell fraction must be in [0, 1), got {fraction}")
    n = len(snapshot)
    k = math.floor(_exact_fraction(fraction) * n)
    if k == 0:
        return snapshot
    order = sorted(range(n), key=lambda i: (snapshot.size[i], snapshot.security_ids[i]))
    keep = np.ones(n, dtype=bool)
    keep[order[:k]] = False
    return snapshot.subset(keep)


def _check_spread(values: np.ndarray, what: str):
    if np.all(values == values[0]):
        raise EngineError("DEGENERATE_BREAKPOINTS", f"all {what} values are equal")


def _bucket(values: np.ndarray, qs: Sequence[float]) -> np.ndarray:
    """0-based group index: number of breakpoints strictly below each value."""
    bps = [breakpoint(values, q) for q in qs]
    return sum((values > b).astype(np.int64) for b in bps)


def assign_2x3(snapshot: FormationSnapshot) -> CellAssignment:
    """Size split at the median; BE/ME split at the 30th and 70th percentiles."""
    if len(snapshot) < 6:
        raise EngineError("TOO_FEW_SECURITIES", f"{len(snapshot)} securities for a 2x3 sort")
    _check_spread(snapshot.size, "size")
    _check_spread(snapshot.beme, "BE/ME")
    size_g = _bucket(snapshot.size, [0.5])
    beme_g = _bucket(snapshot.beme, [0.3, 0.7])
    return CellAssignment(SortScheme.TWO_BY_THREE, snapshot.formation_year, snapshot.security_ids, size_g * 3 + beme_g)


def assign_5x5(snapshot: FormationSnapshot) -> CellAssignment:
    """Independent quintile sorts on size and BE/ME."""
    if len(snapshot) < 25:
        raise EngineError("TOO_FEW_SECURITIES", f"{len(snapshot)} securities for a 5x5 sort")
    _check_spread(snapshot.size, "size")
    _check_spread(snapshot.beme, "BE/ME")
    qs = [0.2, 0.4, 0.6, 0.8]
    return CellAssignment(
        SortScheme.FIVE_BY_FIVE,
        snapshot.formation_year,
        snapshot.security_ids,
        _bucket(snapshot.size, qs) * 5 + _bucket(snapshot.beme, qs),
    )


def value_weighted_return(returns, weights) -> float:
    """sum(w * r) / sum(w) over members with both a return and a weight.

    Computed as ``c + sum(w * (r - c)) / sum(w)`` with ``c`` the first usable
    return, so a cell whose members all earn the same return gets exactly
    that return.
    """
    r = np.asarray(returns, dtype=float)
    w = np.asarray(weights, dtype=float)
    ok = np.isfinite(r) & np.isfinite(w)
    sw = float(w[ok].sum())
    if not ok.any() or sw <= 0:
        raise EngineError("EMPTY_CELL_MONTH", "no member with both a return and a positive weight")
    c = float(r[ok][0])
    return c + float((w[ok] * (r[ok] - c)).sum() / sw)


def _month_centre(R: np.ndarray) -> np.ndarray:
    """First finite return in each month (0 where none); see value_weighted_return."""
    ok = np.isfinite(R)
    first = np.argmax(ok, axis=0)
    c = R[first, np.arange(R.shape[1])]
    return np.where(ok.any(axis=0), c, 0.0)


def _cells(cell_returns: Mapping[str, float], names: Sequence[str]) -> list[float]:
    out = []
    for n in names:
        v = cell_returns.get(n, math.nan)
        if v is None or not math.isfinite(v):
            raise EngineError("MISSING_CELL", f"cell {n} has no return")
        out.append(float(v))
    return out


def compute_smb(cell_returns: Mapping[str, float]) -> float:
    sl, sm, sh, bl, bm, bh = _cells(cell_returns, CELLS_2X3)
    return (sl + sm + sh) / 3 - (bl + bm + bh) / 3


def compute_hml(cell_returns: Mapping[str, float]) -> float:
    sl, sh, bl, bh = _cells(cell_returns, ("S/L", "S/H", "B/L", "B/H"))
    return (sh + bh) / 2 - (sl + bl) / 2


def prior_float_weights(panel: MonthlyPanel) -> np.ndarray:
    """Float cap at the end of the previous month; NaN in the first month."""
    W = np.full(panel.float_cap.shape, np.nan)
    W[:, 1:] = panel.float_cap[:, :-1]
    return W


def market_factor(panel: MonthlyPanel, month: MonthKey, universe: Sequence[str] | None = None) -> float:
    """Float-cap-weighted universe return minus the risk-free rate for ``month``."""
    t = panel.month_index(month)
    if universe is None:
        rows = np.arange(panel.n_securities)
    else:
        rows = np.array([panel.security_index(s) for s in universe], dtype=np.int64)
    if t == 0 or rows.size == 0:
        raise EngineError("EMPTY_UNIVERSE", f"no weighted members in {month}")
    try:
        rm = value_weighted_return(panel.returns[rows, t], panel.float_cap[rows, t - 1])
    except EngineError:
        raise EngineError("EMPTY_UNIVERSE", f"no weighted members in {month}") from None
    return rm - float(panel.risk_free[t])


# ---------------------------------------------------------------------------
# full factor construction


@dataclass
class FactorStudy:
    months: list[MonthKey]
    factors: pd.DataFrame  # mkt_excess, smb, hml, rm, rf
    cells_2x3: pd.DataFrame
    portfolios: pd.DataFrame  # 25 value-weighted cell returns
    cell_count: pd.DataFrame
    cell_cap: pd.DataFrame  # summed market cap
    cell_beme: pd.DataFrame  # mean member BE/ME
    snapshots: dict[int, FormationSnapshot]
    assignments: dict[int, tuple[CellAssignment, CellAssignment]]
    shell_fraction: float = 0.0
    diagnostics: list[Diagnostic] = field(default_factory=list)

    def portfolio_excess(self) -> pd.DataFrame:
        return self.portfolios.sub(self.factors["rf"], axis=0)

    def assignments_frame(self) -> pd.DataFrame:
        recs = []
        for year in sorted(self.assignments):
            for a in self.assignments[year]:
                for sid, cell in sorted(a.mapping().items()):
                    recs.append((year, sid, a.scheme.value, cell))
        return pd.DataFrame(recs, columns=["formation_year", "security_id", "scheme", "cell"])


def formation_years(panel: MonthlyPanel) -> list[int]:
    """Years whose April and May both fall inside the panel span."""
    if not panel.months:
        return []
    first, last = panel.months[0], panel.months[-1]
    return [y for y in range(first.year - 1, last.year + 1) if panel.contains(MonthKey(y, 4)) and panel.contains(MonthKey(y, 5))]


def _formation(panel, year, shell_fraction, size_source):
    diags: list[Diagnostic] = []
    try:
        snap = build_snapshot(panel, year, size_source=size_source)
        diags += snap.diagnostics
        if shell_fraction > 0:
            snap = shell_filter(snap, shell_fraction)
        a23, a55 = assign_2x3(snap), assign_5x5(snap)
    except EngineError as exc:
        diags.append(Diagnostic(exc.code, "", year, None, detail=f"formation year {year}: {exc}"))
        return year, None, None, diags
    for a in (a23, a55):
        present = set(np.unique(a.codes).tolist())
        for c, lab in enumerate(a.labels):
            if c not in present:
                diags.append(Diagnostic("EMPTY_CELL", "", year, None, detail=f"{a.scheme.value} cell {lab} has no members"))
    return year, snap, (a23, a55), diags


def _ratio(num: np.ndarray, den: np.ndarray, cnt: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where((cnt > 0) & (den > 0), num / np.where(den > 0, den, 1.0), np.nan)


def build_factor_study(
    panel: MonthlyPanel,
    *,
    shell_fraction: float = 0.0,
    size_source: str = "april",
    jobs: int = 1,
) -> FactorStudy:
    """Construct factors and the 25 size/value portfolios over the whole panel.

    ``panel`` should already have the exclusion filters applied. With
    ``shell_fraction > 0`` the smallest securities are removed from each
    snapshot before any breakpoint, and the market factor, SMB, HML and
    the 25 portfolios are all built on the remaining universe.
    """
    if not 0.0 <= shell_fraction < 1.0:
        raise EngineError("INVALID_CONFIG", f"shell fraction must be in [0, 1), got {shell_fraction}")
    years = formation_years(panel)
    if not years:
        raise EngineError("EMPTY_SNAPSHOT", "panel span contains no April/May formation point")
    S, T = panel.n_securities, panel.n_months
    G23 = np.full((S, T), -1, dtype=np.int32)
    G55 = np.full((S, T), -1, dtype=np.int32)
    GU = np.full((S, T), -1, dtype=np.int32)
    BEME = np.full((S, T), np.nan)
    snapshots, assignments, diags = {}, {}, []
    t_first = panel.months[0].index
    for year, snap, assign, d in ordered_map(lambda y: _formation(panel, y, shell_fraction, size_source), years, jobs=jobs):
        diags += d
        if snap is None:
            continue
        snapshots[year] = snap
        assignments[year] = assign
        lo, hi = formation_window(year)
        t0 = max(lo.index - t_first, 0)
        t1 = min(hi.index - t_first, T - 1)
        rows = np.array([panel.security_index(s) for s in snap.security_ids], dtype=np.int64)
        G23[rows, t0 : t1 + 1] = assign[0].codes[:, None]
        G55[rows, t0 : t1 + 1] = assign[1].codes[:, None]
        GU[rows, t0 : t1 + 1] = 0
        BEME[rows, t0 : t1 + 1] = snap.beme[:, None]

    W = prior_float_weights(panel)
    centre = _month_centre(panel.returns)
    R = panel.returns - centre[None, :]
    swr, sw, cnt = kernels.grouped_sums(R, W, G23, 6)
    cells23 = _ratio(swr, sw, cnt) + centre[:, None]
    swr, sw, cnt = kernels.grouped_sums(R, W, G55, 25)
    cells55 = _ratio(swr, sw, cnt) + centre[:, None]
    swr, sw, cnt = kernels.grouped_sums(R, W, GU, 1)
    rm = _ratio(swr, sw, cnt)[:, 0] + centre
    ones = np.ones((S, T))
    cap_sum, _, cap_cnt = kernels.grouped_sums(panel.market_cap, ones, G55, 25)
    beme_sum, _, beme_cnt = kernels.grouped_sums(BEME, ones, G55, 25)

    start = panel.month_index(MonthKey(years[0], 5))
    months = list(panel.months[start:])
    sl = slice(start, T)
    rf = panel.risk_free[sl]
    smb = np.full(len(months), np.nan)
    hml = np.full(len(months), np.nan)
    for k, mk in enumerate(months):
        cells = dict(zip(CELLS_2X3, cells23[start + k]))
        try:
            smb[k] = compute_smb(cells)
            hml[k] = compute_hml(cells)
        except EngineError as exc:
            diags.append(Diagnostic("EMPTY_CELL_MONTH", "", mk.year, mk.month, detail=f"factors missing: {exc}"))
        if not math.isfinite(rm[start + k]):
            diags.append(Diagnostic("EMPTY_UNIVERSE", "", mk.year, mk.month, detail="no market return"))
        for j, lab in enumerate(CELLS_5X5):
            if not math.isfinite(cells55[start + k, j]):
                diags.append(Diagnostic("EMPTY_CELL_MONTH", "", mk.year, mk.month, detail=f"5x5 cell {lab} has no return"))

    idx = pd.Index(months, name="month")
    factors = pd.DataFrame({"mkt_excess": rm[sl] - rf, "smb": smb, "hml": hml, "rm": rm[sl], "rf": rf}, index=idx)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_beme = np.where(beme_cnt > 0, beme_sum / np.maximum(beme_cnt, 1), np.nan)
    return FactorStudy(
        months=months,
        factors=factors,
        cells_2x3=pd.DataFrame(cells23[sl], index=idx, columns=list(CELLS_2X3)),
        portfolios=pd.DataFrame(cells55[sl], index=idx, columns=list(CELLS_5X5)),
        cell_count=pd.DataFrame(cap_cnt[sl], index=idx, columns=list(CELLS_5X5)),
        cell_cap=pd.DataFrame(cap_sum[sl], index=idx, columns=list(CELLS_5X5)),
        cell_beme=pd.DataFrame(mean_beme[sl], index=idx, columns=list(CELLS_5X5)),
        snapshots=snapshots,
        assignments=assignments,
        shell_fraction=shell_fraction,
        diagnostics=diags,
    )


def _g10(v: float) -> str:
    return "" if not math.isfinite(v) else f"{v:.10g}"


def write_factors_csv(path, factors: pd.DataFrame) -> None:
    """``year,month,mkt_excess,smb,hml`` in decimal fractions, 10 significant digits."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["year", "month", "mkt_excess", "smb", "hml"])
        for mk, row in factors.iterrows():
            w.writerow([mk.year, mk.month, _g10(row["mkt_excess"]), _g10(row["smb"]), _g10(row["hml"])])


def write_assignments_csv(path, study: FactorStudy) -> None:
    study.assignments_frame().to_csv(path, index=False, lineterminator="\n")
