"""Time-series t statistics and significance stars.

Critical values are normal. Stock returns are fat-tailed, so nominal
significance levels overstate evidence against a null; a failure to
reject under normality is therefore conservative for every hypothesis
except a one-sided test of a positive premium.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .errors import EngineError

STAR_LEVELS = ((0.01, "***"), (0.05, "**"), (0.10, "*"))
LEGEND = "* p < 0.1, ** p < 0.05, *** p < 0.01"
FAT_TAIL_NOTE = (
    "Significance uses normal critical values. Monthly returns are fat-tailed, "
    "so stated levels overstate evidence against a null; non-rejections are conservative."
)


@dataclass(frozen=True)
class MeanTest:
    mean: float
    sd: float
    t: float
    n: int


def mean_t_stat(series) -> MeanTest:
    """mean / (sd / sqrt(n)) with the n - 1 standard deviation.

    Zero dispersion yields t = +-inf for a nonzero mean and 0 for a zero
    mean. Requires at least two finite values.
    """
    x = np.asarray(series, dtype=float)
    x = x[np.isfinite(x)]
    n = x.size
    if n < 2:
        raise EngineError("EMPTY_SERIES", f"need at least 2 observations, got {n}")
    m = float(x.mean())
    sd = float(x.std(ddof=1))
    if sd > 0:
        t = m / (sd / math.sqrt(n))
    else:
        t = math.copysign(math.inf, m) if m != 0 else 0.0
    return MeanTest(m, sd, t, n)


def two_sided_p(t: float) -> float:
    if math.isnan(t):
        return math.nan
    return float(2.0 * norm.sf(abs(t)))


def stars(t: float) -> str:
    p = two_sided_p(t)
    if math.isnan(p):
        return ""
    for level, mark in STAR_LEVELS:
        if p < level:
            return mark
    return ""


def critical_value(alpha: float, *, one_sided: bool = False) -> float:
    return float(norm.isf(alpha if one_sided else alpha / 2.0))


def format_t(t: float, digits: int = 2) -> str:
    if math.isnan(t):
        return "NA"
    if math.isinf(t):
        return "INF" if t > 0 else "-INF"
    return f"{t:.{digits}f}"
