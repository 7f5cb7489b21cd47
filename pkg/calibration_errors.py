"""
calibration_errors.py
---------------------

Exception hierarchy shared by the calibration library and the CLI, plus the
mapping from exception kind to process exit code.

Exit codes:
  0  success
  2  DeficientPositions   (Gram system cannot be solved uniquely)
  3  IllConditionedGram   (least-squares Gram matrix is not positive definite)
  4  InfeasibleDesign, DimensionTooLarge
  5  ReadingsParseError, NonFiniteInput
  6  ConfigError, InvalidParameter
  7  any other numerical failure
"""

from __future__ import annotations

from typing import Dict, Optional, Sequence, Type


class CalibrationError(Exception):
    """Base class for every failure raised by the calibration modules."""


class InvalidParameter(CalibrationError, ValueError):
    pass


class NonFiniteInput(CalibrationError):
    pass


class DimensionTooLarge(CalibrationError):
    pass


class ShapeMismatch(CalibrationError):
    pass


class DeficientPositions(CalibrationError):
    """The chosen positions do not determine the Gram matrix uniquely."""

    def __init__(self, message: str, rank: int, unknowns: int) -> None:
        super().__init__(message)
        self.rank = rank
        self.unknowns = unknowns


class IllConditionedGram(CalibrationError):
    """The least-squares Gram matrix has no real factor (not positive definite)."""

    def __init__(self, message: str, eigenvalues: Sequence[float]) -> None:
        super().__init__(message)
        self.eigenvalues = tuple(float(x) for x in eigenvalues)


class InfeasibleDesign(CalibrationError):
    """The position/sensor counts violate the counting bounds."""

    def __init__(self, message: str, report: object = None) -> None:
        super().__init__(message)
        self.report = report


class RankDeficient(CalibrationError):
    pass


class RankMismatch(CalibrationError):
    def __init__(self, message: str, rank: int, expected: int) -> None:
        super().__init__(message)
        self.rank = rank
        self.expected = expected


class DegenerateDraw(CalibrationError):
    pass


class AllTrialsFailed(CalibrationError):
    pass


class NonPositiveInput(CalibrationError):
    pass


class DegenerateFit(CalibrationError):
    pass


class ConfigError(CalibrationError):
    pass


class ReadingsParseError(CalibrationError):
    def __init__(self, message: str, row: Optional[int] = None, column: Optional[int] = None) -> None:
        super().__init__(message)
        self.row = row
        self.column = column


# ----------------------------------------------------------------------
# Exit codes
# ----------------------------------------------------------------------

EXIT_OK = 0
EXIT_DEFICIENT_POSITIONS = 2
EXIT_ILL_CONDITIONED = 3
EXIT_INFEASIBLE = 4
EXIT_PARSE = 5
EXIT_CONFIG = 6
EXIT_NUMERICAL = 7

EXIT_CODES: Dict[Type[CalibrationError], int] = {
    DeficientPositions: EXIT_DEFICIENT_POSITIONS,
    IllConditionedGram: EXIT_ILL_CONDITIONED,
    InfeasibleDesign: EXIT_INFEASIBLE,
    DimensionTooLarge: EXIT_INFEASIBLE,
    ReadingsParseError: EXIT_PARSE,
    NonFiniteInput: EXIT_PARSE,
    ConfigError: EXIT_CONFIG,
    InvalidParameter: EXIT_CONFIG,
}


def exit_code_for(exc: CalibrationError) -> int:
    """Exit code for a library error; unlisted kinds fall back to EXIT_NUMERICAL."""
    for cls in type(exc).__mro__:
        if cls in EXIT_CODES:
            return EXIT_CODES[cls]
    return EXIT_NUMERICAL
