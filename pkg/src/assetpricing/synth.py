"""Synthetic markets with known ground truth.

Random numbers come from xoshiro256** seeded through splitmix64, so any
implementation of the two algorithms reproduces the streams bit for bit:

* splitmix64: ``z = (s += 0x9E3779B97F4A7C15)``,
  ``z = (z ^ z >> 30) * 0xBF58476D1CE4E5B9``,
  ``z = (z ^ z >> 27) * 0x94D049BB133111EB``, output ``z ^ z >> 31``.
  Four successive outputs from the seed form the xoshiro state.
* xoshiro256**: output ``rotl(s1 * 5, 7) * 9``, then the standard
  ``t = s1 << 17`` shift / xor / ``rotl(s3, 45)`` update.
* uniform: ``(x >> 11) * 2**-53`` in [0, 1).
* normal: Box-Muller on consecutive uniform pairs ``(u1, u2)``,
  ``r = sqrt(-2 log(1 - u1))``, emitting ``r cos(2 pi u2)`` then
  ``r sin(2 pi u2)``.

Draw order (part of the contract): per security uniform beta, uniform
idio sd, uniform non-beta loading, normal log size, normal log BE/ME; per
month normal market, normal z, normal SMB, normal HML; then normal noise
for every (security, month) row-major; contamination noise (only if its sd
is positive); missing-row uniforms (only if the missing rate is positive).
"""
from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import EngineError
from .panel import (
    MonthKey,
    MonthlyPanel,
    SecurityFundamentals,
    Status,
    monthly_rate,
    write_market_index,
    write_panel,
)

_MASK64 = (1 << 64) - 1


def splitmix64(seed: int):
    s = seed & _MASK64
    while True:
        s = (s + 0x9E3779B97F4A7C15) & _MASK64
        z = s
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        yield z ^ (z >> 31)


class Xoshiro256StarStar:
    """xoshiro256** generator with vectorised uniform and normal draws."""

    def __init__(self, seed: int = 0, *, state=None):
        if state is not None:
            st = np.array(state, dtype=np.uint64)
        else:
            sm = splitmix64(int(seed))
            st = np.array([next(sm) for _ in range(4)], dtype=np.uint64)
        if st.shape != (4,) or not st.any():
            raise EngineError("INVALID_CONFIG", "xoshiro state must be four words, not all zero")
        self.state = st

    def next_u64(self, n: int) -> np.ndarray:
        return kernels.xoshiro_fill(self.state, n)

    def uniform(self, n: int) -> np.ndarray:
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def uniform_range(self, lo: float, hi: float, n: int) -> np.ndarray:
        return lo + (hi - lo) * self.uniform(n)

    def normal(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        r = np.sqrt(-2.0 * np.log(1.0 - u[0::2]))
        ang = 2.0 * math.pi * u[1::2]
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(ang)
        out[1::2] = r * np.sin(ang)
        return out[:n]


def _pair(v) -> tuple[float, float]:
    if isinstance(v, str):
        v = v.split(",")
    lo, hi = (float(x) for x in v)
    return lo, hi


@dataclass(frozen=True)
class DgpConfig:
    """Parameters of a synthetic market.

    For the CAPM generator ``market_mean`` / ``market_sd`` describe the raw
    market return; for the three-factor generator they describe the excess
    market return. Ranges are ``(lo, hi)`` of uniform draws.
    """

    n_securities: int = 200
    n_months: int = 240
    start_year: int = 2000
    start_month: int = 1
    seed: int = 20240501
    market_mean: float = 0.01
    market_sd: float = 0.05
    rf_annual: float = 0.03
    rf_compounding: str = "geometric"
    beta_range: tuple[float, float] = (0.5, 1.5)
    smb_range: tuple[float, float] = (-0.3, 1.3)
    hml_range: tuple[float, float] = (-0.6, 0.8)
    idio_sd_range: tuple[float, float] = (0.0, 0.0)
    nonbeta_range: tuple[float, float] = (0.0, 0.0)
    nonbeta_sd: float = 0.02
    smb_mean: float = 0.004
    smb_sd: float = 0.03
    hml_mean: float = 0.003
    hml_sd: float = 0.03
    size_logmean: float = 3.0
    size_logsd: float = 1.0
    beme_logmean: float = -0.7
    beme_logsd: float = 0.5
    float_ratio: float = 0.6
    contamination_sd: float = 0.0
    contamination_fraction: float = 0.1
    missing_rate: float = 0.0
    dynamic_caps: bool = False

    def __post_init__(self):
        for name in ("beta_range", "smb_range", "hml_range", "idio_sd_range", "nonbeta_range"):
            object.__setattr__(self, name, _pair(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        def bad(msg):
            raise EngineError("INVALID_CONFIG", msg)

        if self.n_securities < 1:
            bad("n_securities must be positive")
        if self.n_months < 1:
            bad("months must be positive")
        if not 1 <= self.start_month <= 12:
            bad("start_month must be 1..12")
        if not 0 <= self.seed <= _MASK64:
            bad("seed must be a 64-bit unsigned integer")
        sds = ("market_sd", "nonbeta_sd", "smb_sd", "hml_sd", "size_logsd", "beme_logsd", "contamination_sd")
        for name in sds:
            if not getattr(self, name) >= 0:
                bad(f"{name} must be >= 0")
        for name in ("beta_range", "smb_range", "hml_range", "idio_sd_range", "nonbeta_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                bad(f"{name} must satisfy lo <= hi")
        if self.idio_sd_range[0] < 0:
            bad("idio sd must be >= 0")
        if self.nonbeta_range[0] < 0:
            bad("non-beta loadings must be >= 0")
        if not 0 < self.float_ratio <= 1:
            bad("float_ratio must be in (0, 1]")
        if not 0 <= self.contamination_fraction <= 1:
            bad("contamination_fraction must be in [0, 1]")
        if not 0 <= self.missing_rate < 1:
            bad("missing_rate must be in [0, 1)")
        monthly_rate(self.rf_annual, self.rf_compounding)

    def replace(self, **changes) -> "DgpConfig":
        return dataclasses.replace(self, **changes)

    @property
    def months(self) -> list[MonthKey]:
        first = MonthKey(self.start_year, self.start_month)
        return [first + k for k in range(self.n_months)]


@dataclass
class TruthManifest:
    """Ground truth behind a synthetic panel.

    ``returns()`` recomputes the panel's returns from the stored pieces with
    the same arithmetic used during generation.
    """

    model: str  # "capm" or "ff3"
    config: DgpConfig
    security_ids: tuple[str, ...]
    months: tuple[MonthKey, ...]
    beta: np.ndarray
    s: np.ndarray
    h: np.ndarray
    idio_sd: np.ndarray
    nonbeta: np.ndarray
    size: np.ndarray
    beme: np.ndarray
    contaminated: np.ndarray
    market: np.ndarray  # capm: raw market return; ff3: latent excess market return
    z: np.ndarray
    smb: np.ndarray
    hml: np.ndarray
    rf: np.ndarray  # monthly
    noise: np.ndarray  # (S, T) total idiosyncratic shock
    premia: dict[str, float] = field(default_factory=dict)

    SECURITY_FIELDS = ("beta", "s", "h", "idio_sd", "nonbeta", "size", "beme", "contaminated")
    MONTH_FIELDS = ("market", "z", "smb", "hml", "rf")

    def returns(self) -> np.ndarray:
        rf = self.rf[None, :]
        if self.model == "capm":
            sys = self.beta[:, None] * (self.market[None, :] - rf) + self.nonbeta[:, None] * self.z[None, :]
        else:
            sys = self.beta[:, None] * self.market[None, :] + self.s[:, None] * self.smb[None, :] + self.h[:, None] * self.hml[None, :]
        return rf + sys + self.noise

    def market_index(self) -> np.ndarray:
        """Index return series written for the FMB arm."""
        return self.market.copy() if self.model == "capm" else self.rf + self.market


@dataclass
class SynthMarket:
    panel: MonthlyPanel
    market_index: np.ndarray
    manifest: TruthManifest


def _security_ids(n: int) -> tuple[str, ...]:
    width = max(4, len(str(n)))
    return tuple(f"S{i + 1:0{width}d}" for i in range(n))


def _ranks(values: np.ndarray, ids) -> np.ndarray:
    """Rank in [0, 1] ascending, ties by id."""
    order = sorted(range(len(values)), key=lambda i: (values[i], ids[i]))
    r = np.empty(len(values))
    r[order] = np.arange(len(values)) / max(len(values) - 1, 1)
    return r


def _orthogonalise_by_year(z: np.ndarray, m: np.ndarray, months) -> np.ndarray:
    """Residual of z on [1, m] within each calendar year of ``months``."""
    out = np.zeros_like(z)
    years = np.array([mk.year for mk in months])
    for y in np.unique(years):
        idx = np.nonzero(years == y)[0]
        X = np.column_stack([np.ones(idx.size), m[idx]])
        coef, *_ = np.linalg.lstsq(X, z[idx], rcond=None)
        out[idx] = z[idx] - X @ coef
    return out


def _generate(cfg: DgpConfig, model: str) -> SynthMarket:
    rng = Xoshiro256StarStar(cfg.seed)
    S, T = cfg.n_securities, cfg.n_months
    ids = _security_ids(S)
    months = tuple(cfg.months)

    beta = rng.uniform_range(*cfg.beta_range, S)
    idio = rng.uniform_range(*cfg.idio_sd_range, S)
    nonbeta = rng.uniform_range(*cfg.nonbeta_range, S)
    size = np.exp(cfg.size_logmean + cfg.size_logsd * rng.normal(S))
    beme = np.exp(cfg.beme_logmean + cfg.beme_logsd * rng.normal(S))

    market = cfg.market_mean + cfg.market_sd * rng.normal(T)
    z_raw = cfg.nonbeta_sd * rng.normal(T)
    smb = cfg.smb_mean + cfg.smb_sd * rng.normal(T)
    hml = cfg.hml_mean + cfg.hml_sd * rng.normal(T)
    noise = idio[:, None] * rng.normal(S * T).reshape(S, T)

    n_contam = math.floor(cfg.contamination_fraction * S + 1e-9) if cfg.contamination_sd > 0 else 0
    contaminated = np.zeros(S, dtype=bool)
    if cfg.contamination_sd > 0:
        extra = cfg.contamination_sd * rng.normal(S * T).reshape(S, T)
        order = sorted(range(S), key=lambda i: (size[i], ids[i]))
        contaminated[order[:n_contam]] = True
        noise = noise + np.where(contaminated[:, None], extra, 0.0)
    missing = np.zeros((S, T), dtype=bool)
    if cfg.missing_rate > 0:
        missing = rng.uniform(S * T).reshape(S, T) < cfg.missing_rate

    rf = monthly_rate(np.full(T, cfg.rf_annual), cfg.rf_compounding)
    if model == "capm":
        s_load = np.zeros(S)
        h_load = np.zeros(S)
        z = _orthogonalise_by_year(z_raw, market, months)
        premia = {"market": float(np.mean(market - rf))}
        smb_out, hml_out = np.zeros(T), np.zeros(T)
    else:
        # small size -> high s; high BE/ME -> high h
        s_lo, s_hi = cfg.smb_range
        h_lo, h_hi = cfg.hml_range
        s_load = s_hi - (s_hi - s_lo) * _ranks(size, ids)
        h_load = h_lo + (h_hi - h_lo) * _ranks(beme, ids)
        nonbeta = np.zeros(S)
        z = np.zeros(T)
        smb_out, hml_out = smb, hml
        premia = {"market": float(np.mean(market)), "smb": float(np.mean(smb)), "hml": float(np.mean(hml))}

    man = TruthManifest(
        model, cfg, ids, months, beta, s_load, h_load, idio, nonbeta, size, beme, contaminated,
        market, z, smb_out, hml_out, rf, noise, premia,
    )
    R = man.returns()

    if cfg.dynamic_caps:
        growth = np.cumprod(1.0 + R[:, 1:], axis=1)
        cap = np.column_stack([size, size[:, None] * growth])
    else:
        cap = np.repeat(size[:, None], T, axis=1)

    fundamentals = {}
    first_year, last_year = months[0].year, months[-1].year
    for fy in range(first_year - 1, last_year + 1):
        dec = MonthKey(fy, 12)
        t = dec.index - months[0].index
        for i, sid in enumerate(ids):
            mv = float(cap[i, t]) if 0 <= t < T else float(size[i])
            fundamentals[(sid, fy)] = SecurityFundamentals(sid, fy, float(beme[i] * mv), mv, False)

    has_row = ~missing
    panel = MonthlyPanel(
        security_ids=ids,
        months=months,
        returns=np.where(has_row, R, np.nan),
        market_cap=np.where(has_row, cap, np.nan),
        float_cap=np.where(has_row, cfg.float_ratio * cap, np.nan),
        status=np.where(has_row, int(Status.NORMAL), int(Status.MISSING)).astype(np.int8),
        has_row=has_row,
        rf_annual=np.full(T, float(cfg.rf_annual)),
        fundamentals=fundamentals,
        rf_compounding=cfg.rf_compounding,
    )
    return SynthMarket(panel, man.market_index(), man)


def generate_capm_market(config: DgpConfig) -> SynthMarket:
    """``r_it = rf + beta_i (m_t - rf) + g_i z_t + e_it``.

    ``z`` is a non-market shock with nonnegative loadings ``g_i`` drawn from
    ``nonbeta_range``; it is demeaned and orthogonal to the market within
    each calendar year, so it leaves market-model betas exact while giving
    every security a residual dispersion proportional to ``g_i``. ``e`` is
    N(0, idio_sd_i^2).
    """
    return _generate(config, "capm")


def generate_ff3_market(config: DgpConfig) -> SynthMarket:
    """``r_it - rf = b_i MKT_t + s_i SMB_t + h_i HML_t + e_it`` on latent factors.

    ``s`` falls linearly with size rank and ``h`` rises with BE/ME rank.
    With ``contamination_sd > 0`` the smallest ``contamination_fraction``
    of securities get extra N(0, contamination_sd^2) noise.
    """
    return _generate(config, "ff3")


# ---------------------------------------------------------------------------
# files

MANIFEST_HEADER = ["kind", "key", "field", "value"]


def _config_text(v) -> str:
    if isinstance(v, tuple):
        return ",".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_manifest(path, man: TruthManifest) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        w.writerow(["model", "", "name", man.model])
        for f in dataclasses.fields(man.config):
            w.writerow(["config", "", f.name, _config_text(getattr(man.config, f.name))])
        for k in sorted(man.premia):
            w.writerow(["premium", "", k, repr(man.premia[k])])
        for i, sid in enumerate(man.security_ids):
            for f in TruthManifest.SECURITY_FIELDS:
                v = getattr(man, f)[i]
                w.writerow(["security", sid, f, str(bool(v)).lower() if f == "contaminated" else repr(float(v))])
        for t, mk in enumerate(man.months):
            for f in TruthManifest.MONTH_FIELDS:
                w.writerow(["month", str(mk), f, repr(float(getattr(man, f)[t]))])
        rows, cols = np.nonzero(man.noise)
        for i, t in zip(rows, cols):
            w.writerow(["noise", f"{man.security_ids[i]}@{man.months[t]}", "e", repr(float(man.noise[i, t]))])


def read_manifest(path) -> TruthManifest:
    model = None
    cfg_kw: dict[str, str] = {}
    premia: dict[str, float] = {}
    sec: dict[str, dict[str, str]] = {}
    mon: dict[str, dict[str, float]] = {}
    noise_rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != MANIFEST_HEADER:
            raise EngineError("MALFORMED_ROW", f"{path}: bad manifest header")
        for kind, key, fld, value in reader:
            if kind == "model":
                model = value
            elif kind == "config":
                cfg_kw[fld] = value
            elif kind == "premium":
                premia[fld] = float(value)
            elif kind == "security":
                sec.setdefault(key, {})[fld] = value
            elif kind == "month":
                mon.setdefault(key, {})[fld] = float(value)
            elif kind == "noise":
                noise_rows.append((key, float(value)))
    cfg = config_from_mapping(cfg_kw)
    ids = tuple(sec)
    months = tuple(MonthKey.parse(k) for k in mon)
    arr = {f: np.array([float(sec[s][f]) for s in ids]) for f in TruthManifest.SECURITY_FIELDS if f != "contaminated"}
    contaminated = np.array([sec[s]["contaminated"] == "true" for s in ids])
    marr = {f: np.array([mon[str(m)][f] for m in months]) for f in TruthManifest.MONTH_FIELDS}
    noise = np.zeros((len(ids), len(months)))
    si = {s: i for i, s in enumerate(ids)}
    t0 = months[0].index if months else 0
    for key, v in noise_rows:
        sid, mk = key.split("@")
        noise[si[sid], MonthKey.parse(mk).index - t0] = v
    return TruthManifest(model, cfg, ids, months, contaminated=contaminated, noise=noise, premia=premia, **arr, **marr)


def config_from_mapping(kv) -> DgpConfig:
    """Build a config from string values (as in config files or the manifest)."""
    fields = {f.name: f for f in dataclasses.fields(DgpConfig)}
    kw = {}
    for k, v in kv.items():
        if k not in fields:
            raise EngineError("INVALID_CONFIG", f"unknown synth key {k!r}")
        default = fields[k].default
        try:
            if isinstance(default, bool):
                if str(v).lower() not in ("true", "false", "1", "0"):
                    raise ValueError(v)
                kw[k] = str(v).lower() in ("true", "1")
            elif isinstance(default, int):
                kw[k] = int(v)
            elif isinstance(default, float):
                kw[k] = float(v)
            elif isinstance(default, tuple):
                kw[k] = _pair(v)
            else:
                kw[k] = str(v)
        except ValueError:
            raise EngineError("INVALID_CONFIG", f"bad value for {k}: {v!r}") from None
    return DgpConfig(**kw)


def write_synth(market: SynthMarket, out_dir) -> dict[str, Path]:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    rp, fp, rfp = write_panel(market.panel, d)
    ip, mp = d / "market_index.csv", d / "manifest.csv"
    write_market_index(ip, market.panel.months, market.market_index)
    write_manifest(mp, market.manifest)
    return {"returns": rp, "fundamentals": fp, "riskfree": rfp, "market_index": ip, "manifest": mp}
