"""Monthly equity panel: data model, CSV ingestion, filters, fiscal alignment.

The panel is stored densely: one row per security (sorted id order), one
column per calendar month of the span. Absent observations are NaN in the
float matrices and ``Status.MISSING`` in ``status``; ``has_row`` records
whether the returns file carried a row at all, so that writing the panel
back out reproduces the same observation set.
"""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from functools import total_ordering
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Iterator, Mapping

import numpy as np

from .errors import Diagnostic, EngineError

RETURNS_HEADER = ["security_id", "year", "month", "return", "market_cap", "float_cap", "status"]
FUNDAMENTALS_HEADER = ["security_id", "fiscal_year", "book_equity", "year_end_market_value", "is_financial"]
RISKFREE_HEADER = ["year", "month", "annual_rate"]
INDEX_HEADER = ["year", "month", "return"]


@total_ordering
@dataclass(frozen=True)
class MonthKey:
    year: int
    month: int

    def __post_init__(self):
        if not 1 <= self.month <= 12:
            raise ValueError(f"month out of range: {self.month}")

    @property
    def index(self) -> int:
        """Months since year 0, January."""
        return self.year * 12 + self.month - 1

    @classmethod
    def from_index(cls, idx: int) -> "MonthKey":
        return cls(idx // 12, idx % 12 + 1)

    @classmethod
    def parse(cls, text: str) -> "MonthKey":
        y, m = text.strip().split("-")
        return cls(int(y), int(m))

    def __lt__(self, other):
        if not isinstance(other, MonthKey):
            return NotImplemented
        return self.index < other.index

    def __add__(self, k: int) -> "MonthKey":
        if not isinstance(k, int):
            return NotImplemented
        return MonthKey.from_index(self.index + k)

    def __sub__(self, other):
        if isinstance(other, MonthKey):
            return self.index - other.index
        if isinstance(other, int):
            return MonthKey.from_index(self.index - other)
        return NotImplemented

    def __str__(self) -> str:
        return f"{self.year:04d}-{self.month:02d}"


def month_range(first: MonthKey, last: MonthKey) -> list[MonthKey]:
    return [MonthKey.from_index(i) for i in range(first.index, last.index + 1)]


def formation_year(month: MonthKey) -> int:
    """Formation year whose May-to-April window contains ``month``."""
    return month.year if month.month >= 5 else month.year - 1


def formation_window(year: int) -> tuple[MonthKey, MonthKey]:
    return MonthKey(year, 5), MonthKey(year + 1, 4)


class Status(enum.IntEnum):
    NORMAL = 0
    ST = 1
    STAR_ST = 2
    PT = 3
    MISSING = 4


_STATUS_TEXT = {"NORMAL": Status.NORMAL, "ST": Status.ST, "STAR_ST": Status.STAR_ST, "PT": Status.PT, "": Status.MISSING}


@dataclass(frozen=True)
class SecurityObservation:
    security_id: str
    month: MonthKey
    ret: float
    market_cap: float
    float_cap: float
    status: Status


@dataclass(frozen=True)
class SecurityFundamentals:
    security_id: str
    fiscal_year: int
    book_equity: float
    year_end_market_value: float
    is_financial: bool = False


@dataclass(frozen=True)
class FiscalValues:
    book_equity: float
    market_value: float


def monthly_rate(annual, compounding: str = "geometric"):
    """Convert an annual deposit rate to a monthly rate.

    ``geometric``: (1 + a)**(1/12) - 1. ``simple``: a / 12.
    """
    a = np.asarray(annual, dtype=float)
    if compounding == "geometric":
        return (1.0 + a) ** (1.0 / 12.0) - 1.0
    if compounding == "simple":
        return a / 12.0
    raise EngineError("INVALID_CONFIG", f"unknown rf compounding {compounding!r}")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class MonthlyPanel:
    security_ids: tuple[str, ...]
    months: tuple[MonthKey, ...]
    returns: np.ndarray
    market_cap: np.ndarray
    float_cap: np.ndarray
    status: np.ndarray
    has_row: np.ndarray
    rf_annual: np.ndarray
    fundamentals: Mapping[tuple[str, int], SecurityFundamentals] = field(default_factory=dict)
    rf_compounding: str = "geometric"

    def __post_init__(self):
        S, T = len(self.security_ids), len(self.months)
        for name in ("returns", "market_cap", "float_cap", "status", "has_row"):
            arr = getattr(self, name)
            if arr.shape != (S, T):
                raise ValueError(f"{name} has shape {arr.shape}, expected {(S, T)}")
            object.__setattr__(self, name, _frozen(arr))
        if self.rf_annual.shape != (T,):
            raise ValueError("rf_annual must have one entry per month")
        object.__setattr__(self, "rf_annual", _frozen(self.rf_annual))
        object.__setattr__(self, "fundamentals", MappingProxyType(dict(self.fundamentals)))
        object.__setattr__(self, "_sec_index", {s: i for i, s in enumerate(self.security_ids)})
        if T:
            first = self.months[0].index
            if [m.index for m in self.months] != list(range(first, first + T)):
                raise ValueError("months must be a contiguous ascending range")

    # -- shape / lookup -------------------------------------------------
    @property
    def n_securities(self) -> int:
        return len(self.security_ids)

    @property
    def n_months(self) -> int:
        return len(self.months)

    @property
    def n_observations(self) -> int:
        return int(self.has_row.sum())

    @property
    def span(self) -> tuple[MonthKey, MonthKey] | None:
        if not self.months:
            return None
        return self.months[0], self.months[-1]

    @property
    def risk_free(self) -> np.ndarray:
        """Monthly risk-free rate aligned with ``months``."""
        return monthly_rate(self.rf_annual, self.rf_compounding)

    def security_index(self, security_id: str) -> int:
        return self._sec_index[security_id]

    def month_index(self, month: MonthKey) -> int:
        if not self.months:
            raise EngineError("WINDOW_OUT_OF_SPAN", f"{month} outside empty panel")
        i = month.index - self.months[0].index
        if not 0 <= i < len(self.months):
            raise EngineError("WINDOW_OUT_OF_SPAN", f"{month} outside span {self.months[0]}..{self.months[-1]}")
        return i

    def contains(self, month: MonthKey) -> bool:
        return bool(self.months) and self.months[0] <= month <= self.months[-1]

    def observed(self) -> np.ndarray:
        """Boolean (S, T): a row exists and the status is not MISSING."""
        return self.has_row & (self.status != Status.MISSING)

    def observations(self) -> Iterator[SecurityObservation]:
        rows, cols = np.nonzero(self.has_row)
        for i, t in zip(rows, cols):
            yield SecurityObservation(
                self.security_ids[i],
                self.months[t],
                float(self.returns[i, t]),
                float(self.market_cap[i, t]),
                float(self.float_cap[i, t]),
                Status(int(self.status[i, t])),
            )

    def with_compounding(self, compounding: str) -> "MonthlyPanel":
        monthly_rate(0.0, compounding)  # validates the name
        return _replace(self, rf_compounding=compounding)

    def __eq__(self, other):
        if not isinstance(other, MonthlyPanel):
            return NotImplemented
        return (
            self.security_ids == other.security_ids
            and self.months == other.months
            and self.rf_compounding == other.rf_compounding
            and dict(self.fundamentals) == dict(other.fundamentals)
            and all(
                np.array_equal(getattr(self, n), getattr(other, n), equal_nan=n not in ("status", "has_row"))
                for n in ("returns", "market_cap", "float_cap", "status", "has_row", "rf_annual")
            )
        )

    __hash__ = None  # type: ignore[assignment]


def _replace(panel: MonthlyPanel, **changes) -> MonthlyPanel:
    kw = dict(
        security_ids=panel.security_ids,
        months=panel.months,
        returns=panel.returns,
        market_cap=panel.market_cap,
        float_cap=panel.float_cap,
        status=panel.status,
        has_row=panel.has_row,
        rf_annual=panel.rf_annual,
        fundamentals=panel.fundamentals,
        rf_compounding=panel.rf_compounding,
    )
    kw.update(changes)
    return MonthlyPanel(**kw)


# ---------------------------------------------------------------------------
# CSV ingestion


def _parse_float(text: str, *, allow_empty: bool) -> float:
    text = text.strip()
    if text == "":
        if allow_empty:
            return math.nan
        raise ValueError("empty value")
    v = float(text)
    if not math.isfinite(v):
        raise ValueError(f"non-finite value {text!r}")
    return v


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "y", "t"):
        return True
    if t in ("0", "false", "no", "n", "f", ""):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _rows(path, header) -> Iterator[tuple[int, dict[str, str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            got = next(reader)
        except StopIteration:
            raise EngineError("MALFORMED_ROW", f"{path}: empty file", line=1) from None
        if [h.strip().lstrip("﻿") for h in got] != header:
            raise EngineError("MALFORMED_ROW", f"{path}: header {got} != {header}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                yield lineno, None  # type: ignore[misc]
                continue
            yield lineno, dict(zip(header, row))


def _read_returns(path, issues):
    records = {}
    for lineno, row in _rows(path, RETURNS_HEADER):
        if row is None:
            issues.append(Diagnostic("MALFORMED_ROW", detail=f"returns line {lineno}: wrong field count"))
            continue
        sid = row["security_id"].strip()
        try:
            if not sid:
                raise ValueError("empty security_id")
            mk = MonthKey(int(row["year"]), int(row["month"]))
            status_text = row["status"].strip().upper()
            if status_text not in _STATUS_TEXT:
                raise ValueError(f"unknown status {row['status']!r}")
            status = _STATUS_TEXT[status_text]
            ret = _parse_float(row["return"], allow_empty=True)
            mcap = _parse_float(row["market_cap"], allow_empty=True)
            fcap = _parse_float(row["float_cap"], allow_empty=True)
            if status != Status.MISSING and math.isnan(ret):
                raise ValueError("return required when status is not MISSING")
            if mcap < 0 or fcap < 0:
                raise ValueError("negative capitalisation")
            if fcap > mcap:
                raise ValueError("float_cap exceeds market_cap")
        except ValueError as exc:
            issues.append(Diagnostic("MALFORMED_ROW", sid, detail=f"returns line {lineno}: {exc}"))
            continue
        key = (sid, mk)
        if key in records:
            issues.append(
                Diagnostic("DUPLICATE_KEY", sid, mk.year, mk.month, detail=f"returns line {lineno}: duplicate (security, month)")
            )
            continue
        records[key] = (ret, mcap, fcap, status)
    return records


def _read_fundamentals(path, issues):
    out = {}
    for lineno, row in _rows(path, FUNDAMENTALS_HEADER):
        if row is None:
            issues.append(Diagnostic("MALFORMED_ROW", detail=f"fundamentals line {lineno}: wrong field count"))
            continue
        sid = row["security_id"].strip()
        try:
            if not sid:
                raise ValueError("empty security_id")
            fy = int(row["fiscal_year"])
            be = _parse_float(row["book_equity"], allow_empty=False)
            mv = _parse_float(row["year_end_market_value"], allow_empty=False)
            if mv <= 0:
                raise ValueError("year_end_market_value must be positive")
            fin = _parse_bool(row["is_financial"])
        except ValueError as exc:
            issues.append(Diagnostic("MALFORMED_ROW", sid, detail=f"fundamentals line {lineno}: {exc}"))
            continue
        if (sid, fy) in out:
            issues.append(Diagnostic("DUPLICATE_KEY", sid, fy, None, detail=f"fundamentals line {lineno}: duplicate (security, fiscal_year)"))
            continue
        out[(sid, fy)] = SecurityFundamentals(sid, fy, be, mv, fin)
    return out


def _read_monthly_series(path, header, value_col, label, issues):
    out = {}
    for lineno, row in _rows(path, header):
        if row is None:
            issues.append(Diagnostic("MALFORMED_ROW", detail=f"{label} line {lineno}: wrong field count"))
            continue
        try:
            mk = MonthKey(int(row["year"]), int(row["month"]))
            v = _parse_float(row[value_col], allow_empty=False)
        except ValueError as exc:
            issues.append(Diagnostic("MALFORMED_ROW", detail=f"{label} line {lineno}: {exc}"))
            continue
        if mk in out:
            issues.append(Diagnostic("DUPLICATE_KEY", "", mk.year, mk.month, detail=f"{label} line {lineno}: duplicate month"))
            continue
        out[mk] = v
    return out


def read_panel(returns_file, fundamentals_file, riskfree_file, *, rf_compounding="geometric"):
    """Parse the three input files, collecting every problem found.

    Returns ``(panel, diagnostics)``; ``panel`` is None when any
    diagnostic was raised. ``load_panel`` is the raising wrapper.
    """
    issues: list[Diagnostic] = []
    for p in (returns_file, fundamentals_file, riskfree_file):
        if not Path(p).is_file():
            issues.append(Diagnostic("MISSING_INPUT", detail=f"file not found: {p}"))
    if issues:
        return None, issues
    try:
        records = _read_returns(returns_file, issues)
        fundamentals = _read_fundamentals(fundamentals_file, issues)
        rf = _read_monthly_series(riskfree_file, RISKFREE_HEADER, "annual_rate", "riskfree", issues)
    except EngineError as exc:
        issues.append(Diagnostic(exc.code, detail=str(exc)))
        return None, issues

    sids = sorted({k[0] for k in records})
    if records:
        first = min(k[1] for k in records)
        last = max(k[1] for k in records)
        months = month_range(first, last)
    else:
        months = []
    rf_arr = np.full(len(months), np.nan)
    for t, mk in enumerate(months):
        if mk in rf:
            rf_arr[t] = rf[mk]
        else:
            issues.append(Diagnostic("RISKFREE_GAP", "", mk.year, mk.month, detail="span month has no risk-free rate"))
    if issues:
        return None, issues

    S, T = len(sids), len(months)
    sidx = {s: i for i, s in enumerate(sids)}
    t0 = months[0].index if months else 0
    ret = np.full((S, T), np.nan)
    mcap = np.full((S, T), np.nan)
    fcap = np.full((S, T), np.nan)
    status = np.full((S, T), int(Status.MISSING), dtype=np.int8)
    has_row = np.zeros((S, T), dtype=bool)
    for (sid, mk), (r, mc, fc, st) in records.items():
        i, t = sidx[sid], mk.index - t0
        ret[i, t], mcap[i, t], fcap[i, t], status[i, t] = r, mc, fc, int(st)
        has_row[i, t] = True
    panel = MonthlyPanel(
        security_ids=tuple(sids),
        months=tuple(months),
        returns=ret,
        market_cap=mcap,
        float_cap=fcap,
        status=status,
        has_row=has_row,
        rf_annual=rf_arr,
        fundamentals=fundamentals,
        rf_compounding=rf_compounding,
    )
    return panel, []


def load_panel(returns_file, fundamentals_file, riskfree_file, *, rf_compounding="geometric") -> MonthlyPanel:
    """Load and validate a panel; raise ``EngineError`` on the first problem.

    Error codes: MALFORMED_ROW, DUPLICATE_KEY, RISKFREE_GAP, MISSING_INPUT.
    """
    panel, issues = read_panel(returns_file, fundamentals_file, riskfree_file, rf_compounding=rf_compounding)
    if issues:
        first = issues[0]
        raise EngineError(first.code, first.detail, diagnostics=issues)
    return panel


def read_market_index(path, panel: MonthlyPanel) -> tuple[np.ndarray | None, list[Diagnostic]]:
    issues: list[Diagnostic] = []
    if not Path(path).is_file():
        return None, [Diagnostic("MISSING_INPUT", detail=f"file not found: {path}")]
    try:
        series = _read_monthly_series(path, INDEX_HEADER, "return", "market index", issues)
    except EngineError as exc:
        return None, [Diagnostic(exc.code, detail=str(exc))]
    out = np.full(panel.n_months, np.nan)
    for t, mk in enumerate(panel.months):
        if mk in series:
            out[t] = series[mk]
        else:
            issues.append(Diagnostic("INDEX_GAP", "", mk.year, mk.month, detail="span month has no market index return"))
    if issues:
        return None, issues
    return out, []


def load_market_index(path, panel: MonthlyPanel) -> np.ndarray:
    """Load an external market index (``year,month,return``) aligned to the panel span."""
    out, issues = read_market_index(path, panel)
    if issues:
        raise EngineError(issues[0].code, issues[0].detail, diagnostics=issues)
    return out


# ---------------------------------------------------------------------------
# CSV output


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def write_panel(panel: MonthlyPanel, directory, *, names=("returns.csv", "fundamentals.csv", "riskfree.csv")) -> tuple[Path, Path, Path]:
    """Write the panel in the three input schemas (lossless float repr)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rp, fp, rfp = (d / n for n in names)
    with open(rp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RETURNS_HEADER)
        for i, sid in enumerate(panel.security_ids):
            for t in np.nonzero(panel.has_row[i])[0]:
                mk = panel.months[t]
                st = Status(int(panel.status[i, t]))
                w.writerow(
                    [
                        sid,
                        mk.year,
                        mk.month,
                        _fmt(panel.returns[i, t]),
                        _fmt(panel.market_cap[i, t]),
                        _fmt(panel.float_cap[i, t]),
                        "" if st == Status.MISSING else st.name,
                    ]
                )
    with open(fp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FUNDAMENTALS_HEADER)
        for key in sorted(panel.fundamentals):
            f = panel.fundamentals[key]
            w.writerow([f.security_id, f.fiscal_year, _fmt(f.book_equity), _fmt(f.year_end_market_value), int(f.is_financial)])
    with open(rfp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RISKFREE_HEADER)
        for mk, a in zip(panel.months, panel.rf_annual):
            w.writerow([mk.year, mk.month, _fmt(a)])
    return rp, fp, rfp


def write_market_index(path, months: Iterable[MonthKey], returns: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INDEX_HEADER)
        for mk, r in zip(months, returns):
            w.writerow([mk.year, mk.month, _fmt(r)])


# ---------------------------------------------------------------------------
# filters


@dataclass(frozen=True)
class ExclusionRules:
    drop_statuses: frozenset = frozenset({Status.ST, Status.STAR_ST, Status.PT})
    drop_negative_book_equity: bool = True
    drop_financials: bool = True


def apply_exclusion_filters(panel: MonthlyPanel, rules: ExclusionRules = ExclusionRules()) -> MonthlyPanel:
    """Return a new panel with rule-violating observations removed.

    Status rules remove the flagged security-months. Book-equity and
    financial-company rules are fiscal-year scoped: a violation in fiscal
    year Y drops the fundamentals record and the security's observations
    in the formation window May Y+1 to April Y+2 that uses it. Book
    equity of exactly zero is dropped too, since BE/ME must be positive.
    """
    keep = panel.has_row.copy()
    drop_codes = [int(s) for s in rules.drop_statuses]
    if drop_codes:
        keep &= ~np.isin(panel.status, drop_codes)

    fundamentals = {}
    for key, f in panel.fundamentals.items():
        bad = (rules.drop_negative_book_equity and f.book_equity <= 0) or (rules.drop_financials and f.is_financial)
        if not bad:
            fundamentals[key] = f
            continue
        if f.security_id not in panel._sec_index or not panel.months:
            continue
        i = panel.security_index(f.security_id)
        lo, hi = formation_window(f.fiscal_year + 1)
        t_lo = max(lo.index - panel.months[0].index, 0)
        t_hi = min(hi.index - panel.months[0].index, panel.n_months - 1)
        if t_lo <= t_hi:
            keep[i, t_lo : t_hi + 1] = False

    removed = panel.has_row & ~keep
    ret = np.where(removed, np.nan, panel.returns)
    mcap = np.where(removed, np.nan, panel.market_cap)
    fcap = np.where(removed, np.nan, panel.float_cap)
    status = np.where(removed, int(Status.MISSING), panel.status).astype(np.int8)
    return _replace(panel, returns=ret, market_cap=mcap, float_cap=fcap, status=status, has_row=keep, fundamentals=fundamentals)


def continuous_listing_subset(panel: MonthlyPanel, window: tuple[MonthKey, MonthKey]) -> list[str]:
    """Securities observed in at least one month of every calendar year of ``window``.

    Only the months of each year that fall inside the window count. Output
    is sorted.
    """
    start, end = window
    if end < start:
        raise EngineError("EMPTY_WINDOW", f"window {start}..{end} is empty")
    t0 = panel.month_index(start)
    t1 = panel.month_index(end)
    obs = panel.observed()[:, t0 : t1 + 1]
    years = np.array([m.year for m in panel.months[t0 : t1 + 1]])
    ok = np.ones(panel.n_securities, dtype=bool)
    for y in np.unique(years):
        ok &= obs[:, years == y].any(axis=1)
    return [s for s, k in zip(panel.security_ids, ok) if k]


def fiscal_align(panel: MonthlyPanel, trading_month: MonthKey) -> tuple[dict[str, FiscalValues], list[Diagnostic]]:
    """Accounting values in force for ``trading_month``.

    A trading month in May t .. April t+1 uses fiscal year t-1 books. The
    universe is every security with a row somewhere in that formation
    window, so the result is constant across the window. Securities lacking
    the record are reported as NO_FUNDAMENTALS diagnostics.
    """
    panel.month_index(trading_month)
    t = formation_year(trading_month)
    fy = t - 1
    lo, hi = formation_window(t)
    t_lo = max(lo.index - panel.months[0].index, 0)
    t_hi = min(hi.index - panel.months[0].index, panel.n_months - 1)
    present = panel.has_row[:, t_lo : t_hi + 1].any(axis=1)
    out: dict[str, FiscalValues] = {}
    diags: list[Diagnostic] = []
    for sid, p in zip(panel.security_ids, present):
        if not p:
            continue
        f = panel.fundamentals.get((sid, fy))
        if f is None:
            diags.append(Diagnostic("NO_FUNDAMENTALS", sid, fy, None, detail=f"no fiscal-year {fy} record for formation year {t}"))
            continue
        out[sid] = FiscalValues(f.book_equity, f.year_end_market_value)
    return out, diags
