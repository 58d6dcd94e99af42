"""Error type and diagnostics records shared by every stage."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

# Codes that describe bad input files or configuration rather than a
# failure while computing. The CLI maps these to exit code 2.
VALIDATION_CODES = frozenset(
    {
        "MALFORMED_ROW",
        "DUPLICATE_KEY",
        "RISKFREE_GAP",
        "INDEX_GAP",
        "INVALID_CONFIG",
        "MISSING_INPUT",
    }
)


class EngineError(Exception):
    """Raised for every contract violation in the engine.

    ``code`` is a stable upper-case identifier (``RANK_DEFICIENT``,
    ``RISKFREE_GAP``...) that callers and tests branch on.
    """

    def __init__(self, code: str, message: str = "", **details):
        self.code = code
        self.details = details
        super().__init__(f"{code}: {message}" if message else code)

    @property
    def is_validation(self) -> bool:
        return self.code in VALIDATION_CODES


@dataclass(frozen=True)
class Diagnostic:
    code: str
    security_id: str = ""
    year: int | None = None
    month: int | None = None
    detail: str = ""

    def sort_key(self):
        return (
            self.security_id,
            self.year if self.year is not None else -1,
            self.month if self.month is not None else -1,
            self.code,
            self.detail,
        )


DIAGNOSTIC_HEADER = ["code", "security_id", "year", "month", "detail"]


def sorted_diagnostics(diags: Iterable[Diagnostic]) -> list[Diagnostic]:
    return sorted(diags, key=Diagnostic.sort_key)


def write_diagnostics(path: str | Path, diags: Iterable[Diagnostic]) -> None:
    """Write diagnostics as CSV ordered by security id, then month."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DIAGNOSTIC_HEADER)
        for d in sorted_diagnostics(diags):
            w.writerow(
                [
                    d.code,
                    d.security_id,
                    "" if d.year is None else d.year,
                    "" if d.month is None else d.month,
                    d.detail,
                ]
            )
