"""Fama-MacBeth CAPM tests and Fama-French three-factor regressions on monthly equity panels."""
from .errors import Diagnostic, EngineError
from .kernels import BACKEND
from .panel import MonthKey, MonthlyPanel, load_panel

__version__ = "0.1.0"

__all__ = ["BACKEND", "Diagnostic", "EngineError", "MonthKey", "MonthlyPanel", "load_panel", "__version__"]
