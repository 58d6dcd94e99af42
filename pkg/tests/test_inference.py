import math

import numpy as np
import pytest

from assetpricing import inference
from assetpricing.errors import EngineError


def test_mean_t_formula(rng):
    x = rng.normal(0.01, 0.05, 48)
    mt = inference.mean_t_stat(x)
    assert mt.t == pytest.approx(x.mean() / (x.std(ddof=1) / math.sqrt(48)), rel=1e-12)
    assert mt.n == 48


def test_degenerate_series():
    assert inference.mean_t_stat([0.01] * 4).t == math.inf
    assert inference.mean_t_stat([-0.01] * 4).t == -math.inf
    assert inference.mean_t_stat([1.0, -1.0]).t == 0.0
    assert inference.mean_t_stat([0.0, 0.0]).t == 0.0
    with pytest.raises(EngineError, match="EMPTY_SERIES"):
        inference.mean_t_stat([1.0, np.nan])


def test_stars_and_format():
    assert inference.stars(2.6) == "***"
    assert inference.stars(-2.0) == "**"
    assert inference.stars(1.7) == "*"
    assert inference.stars(1.6) == ""
    assert inference.stars(math.inf) == "***"
    assert inference.format_t(math.inf) == "INF"
    assert inference.format_t(-math.inf) == "-INF"
    assert inference.format_t(math.nan) == "NA"
    assert inference.format_t(1.234) == "1.23"


def test_critical_values():
    assert inference.critical_value(0.05) == pytest.approx(1.959964, abs=1e-6)
    assert inference.critical_value(0.05, one_sided=True) == pytest.approx(1.644854, abs=1e-6)
    assert inference.LEGEND == "* p < 0.1, ** p < 0.05, *** p < 0.01"
