"""Command-line front end: ``validate``, ``synth``, ``fmb`` and ``ff3``.

Configuration is a flat ``key = value`` file. ``#`` starts a comment and
blank lines are ignored. Relative paths are resolved against the config
file's directory. Command-line flags override file values. Unknown keys
are rejected before any computation.

Exit codes: 0 success, 1 runtime failure, 2 validation failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import pandas as pd

from . import ff3, fmb, synth
from .errors import EngineError, write_diagnostics
from .factors import SIZE_SOURCES, write_assignments_csv, write_factors_csv
from .panel import apply_exclusion_filters, load_market_index, load_panel, read_market_index, read_panel

log = logging.getLogger("assetpricing")

PATH_KEYS = ("returns", "fundamentals", "riskfree", "market_index", "out")
SYNTH_PREFIX = "synth."
WEIGHT_BASES = ("prior_float",)
PERCENTILE_RULES = ("ceil_rank",)


@dataclass
class RunConfig:
    returns: Path = Path("returns.csv")
    fundamentals: Path = Path("fundamentals.csv")
    riskfree: Path = Path("riskfree.csv")
    market_index: Path = Path("market_index.csv")
    out: Path = Path("out")
    schemes: tuple[fmb.PeriodScheme, ...] = fmb.DEFAULT_SCHEMES
    scheme: int | None = None  # 1-based selection from ``schemes``
    variants: tuple[str, ...] = ("A", "B", "C", "D")
    n_groups: int = 20
    min_obs: int = 24
    alphas: tuple[float, ...] = (0.10, 0.05, 0.01)
    rf_compounding: str = "geometric"
    weight_base: str = "prior_float"
    percentile_rule: str = "ceil_rank"
    size_source: str = "april"
    apply_filters: bool = True
    shell_fraction: float = 0.30
    intercept_b: bool = False
    min_overlap: int = ff3.MIN_OVERLAP
    jobs: int = 1
    seed: int | None = None
    synth_model: str = "ff3"
    synth: dict[str, str] = field(default_factory=dict)

    def selected_schemes(self) -> tuple[fmb.PeriodScheme, ...]:
        if self.scheme is None:
            return self.schemes
        if not 1 <= self.scheme <= len(self.schemes):
            raise EngineError("INVALID_CONFIG", f"--scheme {self.scheme} out of range 1..{len(self.schemes)}")
        return (self.schemes[self.scheme - 1],)

    def synth_config(self) -> synth.DgpConfig:
        kv = dict(self.synth)
        if self.seed is not None:
            kv["seed"] = str(self.seed)
        return synth.config_from_mapping(kv)


def _bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes"):
        return True
    if s in ("0", "false", "no"):
        return False
    raise ValueError(v)


def _convert(key: str, value: str, base: Path):
    v = value.strip()
    if key in PATH_KEYS:
        p = Path(v)
        return p if p.is_absolute() else base / p
    if key == "schemes":
        return tuple(fmb.PeriodScheme.parse(s) for s in v.split(";") if s.strip())
    if key == "variants":
        return tuple(x.strip().upper() for x in v.split(",") if x.strip())
    if key == "alphas":
        return tuple(float(x) for x in v.split(","))
    if key in ("n_groups", "min_obs", "min_overlap", "jobs", "seed", "scheme"):
        return int(v)
    if key == "shell_fraction":
        return float(v)
    if key in ("apply_filters", "intercept_b"):
        return _bool(v)
    return v


def parse_config_text(text: str, base: Path = Path(".")) -> dict:
    """Parse the flat key = value grammar into converted RunConfig fields."""
    known = {f.name for f in dataclasses.fields(RunConfig)} - {"synth"}
    out: dict = {"synth": {}}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise EngineError("INVALID_CONFIG", f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.startswith(SYNTH_PREFIX):
            name = key[len(SYNTH_PREFIX) :]
            if name == "model":
                out["synth_model"] = value
            else:
                out["synth"][name] = value
            continue
        if key not in known:
            raise EngineError("INVALID_CONFIG", f"line {lineno}: unknown key {key!r}")
        try:
            out[key] = _convert(key, value, base)
        except (ValueError, EngineError) as exc:
            raise EngineError("INVALID_CONFIG", f"line {lineno}: bad value for {key}: {exc}") from None
    return out


def validate_config(cfg: RunConfig) -> None:
    def bad(msg):
        raise EngineError("INVALID_CONFIG", msg)

    for v in cfg.variants:
        if v not in fmb.VARIANTS:
            bad(f"unknown variant {v!r}")
    if cfg.rf_compounding not in ("geometric", "simple"):
        bad("rf_compounding must be geometric or simple")
    if cfg.weight_base not in WEIGHT_BASES:
        bad(f"weight_base must be one of {WEIGHT_BASES}")
    if cfg.percentile_rule not in PERCENTILE_RULES:
        bad(f"percentile_rule must be one of {PERCENTILE_RULES}")
    if cfg.size_source not in SIZE_SOURCES:
        bad(f"size_source must be one of {SIZE_SOURCES}")
    if not 0.0 <= cfg.shell_fraction < 1.0:
        bad("shell_fraction must be in [0, 1)")
    if cfg.jobs < 1:
        bad("jobs must be >= 1")
    if cfg.n_groups < 1 or cfg.min_obs < 3 or cfg.min_overlap < 1:
        bad("n_groups, min_obs and min_overlap must be positive (min_obs >= 3)")
    if not all(0 < a < 1 for a in cfg.alphas):
        bad("alphas must lie in (0, 1)")
    if cfg.synth_model not in ("capm", "ff3"):
        bad("synth.model must be capm or ff3")
    if not cfg.schemes:
        bad("no schemes configured")
    cfg.selected_schemes()
    cfg.synth_config()


def build_config(args: argparse.Namespace) -> RunConfig:
    values: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise EngineError("MISSING_INPUT", f"config file not found: {path}")
        values = parse_config_text(path.read_text(encoding="utf-8"), path.parent)
    for flag in ("out", "jobs", "shell_fraction", "seed", "scheme"):
        v = getattr(args, flag, None)
        if v is not None:
            values[flag] = Path(v) if flag == "out" else v
    cfg = RunConfig(**values)
    validate_config(cfg)
    return cfg


# ---------------------------------------------------------------------------
# output helpers


def _write_frame(frame: pd.DataFrame, path: Path) -> None:
    frame.to_csv(path, index=False, lineterminator="\n", float_format="%.10g")


def _write_text(text: str, path: Path) -> None:
    path.write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")


def _gammas_frame(result: fmb.FMBResult) -> pd.DataFrame:
    frames = []
    for run in result.runs:
        for v, g in run.gammas.items():
            f = g.copy()
            f.insert(0, "month", [m.month for m in g.index])
            f.insert(0, "year", [m.year for m in g.index])
            f.insert(0, "window", run.scheme.label)
            f.insert(0, "group", v)
            frames.append(f.reset_index(drop=True))
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()


def _portfolios_frame(result: fmb.FMBResult) -> pd.DataFrame:
    recs = []
    for run in result.runs:
        ports = run.portfolios
        for p in range(1, ports.n_groups + 1):
            for sid in ports.members(p):
                recs.append((str(run.scheme), p, sid, ports.formation_betas[sid]))
    return pd.DataFrame(recs, columns=["scheme", "portfolio", "security_id", "formation_beta"])


def _load(cfg: RunConfig):
    return load_panel(cfg.returns, cfg.fundamentals, cfg.riskfree, rf_compounding=cfg.rf_compounding)


# ---------------------------------------------------------------------------
# commands


def cmd_validate(cfg: RunConfig) -> int:
    panel, diags = read_panel(cfg.returns, cfg.fundamentals, cfg.riskfree, rf_compounding=cfg.rf_compounding)
    if panel is not None and cfg.market_index.is_file():
        _, d = read_market_index(cfg.market_index, panel)
        diags += d
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_diagnostics(cfg.out / "diagnostics.csv", diags)
    for d in diags:
        print(f"{d.code}: {d.security_id} {d.year or ''}-{d.month or ''} {d.detail}".rstrip(), file=sys.stderr)
    return 0 if not diags else 2


def cmd_synth(cfg: RunConfig) -> int:
    dgp = cfg.synth_config()
    gen = synth.generate_capm_market if cfg.synth_model == "capm" else synth.generate_ff3_market
    paths = synth.write_synth(gen(dgp), cfg.out)
    for p in paths.values():
        print(p)
    return 0


def cmd_fmb(cfg: RunConfig) -> int:
    panel = _load(cfg)
    market = load_market_index(cfg.market_index, panel)
    result = fmb.run_fmb(
        panel,
        market,
        cfg.selected_schemes(),
        variants=cfg.variants,
        n_groups=cfg.n_groups,
        min_obs=cfg.min_obs,
        alphas=cfg.alphas,
        jobs=cfg.jobs,
    )
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    _write_frame(fmb.table3_frame(result.rows), out / "table3.csv")
    _write_text(fmb.table3_markdown(result.rows), out / "table3.md")
    _write_frame(_gammas_frame(result), out / "gammas_monthly.csv")
    _write_frame(result.verdicts, out / "verdicts.csv")
    _write_frame(fmb.gamma_summary_frame(result.rows), out / "gamma_summary.csv")
    _write_frame(_portfolios_frame(result), out / "portfolios.csv")
    write_diagnostics(out / "diagnostics.csv", result.diagnostics)
    return 0


def _write_grids(prefix: str, grid: ff3.GridResult, out: Path) -> None:
    names = list(grid.coefficient_names())
    for nm in names:
        for stat in (nm, f"t_{nm}"):
            _write_frame(grid.long(stat), out / f"{prefix}_{stat}.csv")
    for stat in ("adj_r2", "se"):
        _write_frame(grid.long(stat), out / f"{prefix}_{stat}.csv")


def _write_excess(prefix: str, study: ff3.FF3Study, out: Path) -> None:
    fs = study.factors
    _write_frame(ff3.grid_long(study.descriptive["excess_return"]), out / f"{prefix}_excess_return.csv")
    _write_frame(ff3.spreads_frame(study.spreads), out / f"{prefix}_spreads.csv")
    md = ff3.excess_return_markdown(
        study.descriptive, study.spreads, fs.months[0], fs.months[-1], len(fs.months), filtered=study.filtered
    )
    _write_text(md, out / f"{prefix}.md")


def cmd_ff3(cfg: RunConfig) -> int:
    panel = _load(cfg)
    if cfg.apply_filters:
        panel = apply_exclusion_filters(panel)
    kw = dict(size_source=cfg.size_source, intercept_b=cfg.intercept_b, min_overlap=cfg.min_overlap, jobs=cfg.jobs)
    base = ff3.run_ff3_study(panel, **kw)
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    fs = base.factors
    write_factors_csv(out / "factors.csv", fs.factors)
    write_assignments_csv(out / "assignments.csv", fs)
    for stat in ("market_value", "beme", "share", "count"):
        _write_frame(ff3.grid_long(base.descriptive[stat]), out / f"table6_{stat}.csv")
    _write_text(ff3.descriptive_markdown(base.descriptive, fs.months[0], fs.months[-1], len(fs.months)), out / "table6.md")
    _write_excess("table7", base, out)
    for num, spec in ((8, ff3.SpecKind.MKT_ONLY), (9, ff3.SpecKind.SMB_HML_ONLY), (10, ff3.SpecKind.THREE_FACTOR)):
        _write_grids(f"table{num}", base.grids[spec], out)
        _write_text(ff3.grid_markdown(base.grids[spec]), out / f"table{num}.md")
    diags = list(base.diagnostics)

    if cfg.shell_fraction > 0:
        filt = ff3.run_ff3_study(panel, shell_fraction=cfg.shell_fraction, specs=(ff3.SpecKind.THREE_FACTOR,), **kw)
        write_factors_csv(out / "factors_filtered.csv", filt.factors.factors)
        write_assignments_csv(out / "assignments_filtered.csv", filt.factors)
        _write_excess("table11", filt, out)
        g = filt.grids[ff3.SpecKind.THREE_FACTOR]
        _write_grids("table12", g, out)
        lo_u = base.grids[ff3.SpecKind.THREE_FACTOR].min_adj_r2()
        note = (
            f"Minimum adjusted R^2 across the 25 cells: {lo_u:.2f} unfiltered, "
            f"{g.min_adj_r2():.2f} after removing the smallest {cfg.shell_fraction:.0%} by size."
        )
        _write_text(ff3.grid_markdown(g) + "\n" + note, out / "table12.md")
        diags += [dataclasses.replace(d, detail="[filtered] " + d.detail) for d in filt.diagnostics]
    write_diagnostics(out / "diagnostics.csv", diags)
    return 0


COMMANDS = {"validate": cmd_validate, "synth": cmd_synth, "fmb": cmd_fmb, "ff3": cmd_ff3}


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="assetpricing", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "validate": "check input files; exit 2 with diagnostics.csv if anything is wrong",
        "synth": "write a synthetic panel and its truth manifest",
        "fmb": "Fama-MacBeth CAPM tests over the configured period schemes",
        "ff3": "factor construction and three-factor regressions (plus the shell-filtered study)",
    }
    for name in COMMANDS:
        s = sub.add_parser(name, help=helps[name])
        s.add_argument("--config", help="flat key = value config file")
        s.add_argument("--out", help="output directory")
        s.add_argument("--jobs", type=int, help="worker threads (outputs do not depend on it)")
        if name == "ff3":
            s.add_argument("--shell-fraction", dest="shell_fraction", type=float, help="0 disables the filtered study")
        if name == "synth":
            s.add_argument("--seed", type=int)
        if name == "fmb":
            s.add_argument("--scheme", type=int, help="run only the i-th configured scheme (1-based)")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        return COMMANDS[args.command](cfg)
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if exc.is_validation else 1


if __name__ == "__main__":
    raise SystemExit(main())
