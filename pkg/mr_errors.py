"""
Error Classification
Exception hierarchy, error categories and process exit codes
"""

from enum import Enum
from typing import Any, Optional


# ============================================================================
# Error Classification
# ============================================================================

class ErrorCategory(Enum):
    """Failure classes surfaced by the CLI as distinct exit codes."""
    CONFIG = "config"          # Unparseable or inconsistent configuration
    DATA = "data"              # Missing columns, bad cells, too little data
    NUMERICAL = "numerical"    # Singular systems, divergence, rank problems


EXIT_CODES = {
    None: 0,
    ErrorCategory.CONFIG: 2,
    ErrorCategory.DATA: 3,
    ErrorCategory.NUMERICAL: 4,
}
EXIT_UNEXPECTED = 1


def exit_code_for(error: Optional[BaseException]) -> int:
    """Map an exception (or None for success) to a process exit code."""
    if error is None:
        return EXIT_CODES[None]
    if isinstance(error, NlmrError):
        return EXIT_CODES[error.category]
    return EXIT_UNEXPECTED


class NlmrWarning(UserWarning):
    """Recoverable anomaly that must be reported (clamping, fallbacks, boundary lambda)."""


class NlmrError(Exception):
    """Base class for every error raised by the toolkit."""
    category: ErrorCategory = ErrorCategory.NUMERICAL
    module: str = "nlmr"

    def __init__(self, message: str, module: Optional[str] = None):
        super().__init__(message)
        if module is not None:
            self.module = module

    def describe(self) -> str:
        return f"[{self.category.value}:{self.module}] {type(self).__name__}: {self}"


# ============================================================================
# Numerical errors
# ============================================================================

class RankDeficient(NlmrError):
    module = "linmod"


class NonFinite(NlmrError):
    category = ErrorCategory.DATA
    module = "linmod"


class SingularSystem(NlmrError):
    module = "linmod"


class NotConverged(NlmrError):
    """Iterative fit ran out of iterations; `last` holds the final iterate."""
    module = "linmod"

    def __init__(self, message: str, last: Any = None, module: Optional[str] = None):
        super().__init__(message, module)
        self.last = last


class QuasiSeparation(NlmrError):
    module = "linmod"


class DegenerateKnots(NlmrError):
    category = ErrorCategory.DATA
    module = "basis"


class InvalidOrder(NlmrError):
    category = ErrorCategory.CONFIG
    module = "basis"


class NotIdentifiable(NlmrError):
    module = "estimators"


class MethodMismatch(NlmrError):
    category = ErrorCategory.CONFIG
    module = "inference"


class DerivativeUnavailable(NlmrError):
    module = "estimators"


class SingularThetaCov(NlmrError):
    module = "inference"


class RankTooLow(NlmrError):
    module = "inference"


class QuadratureFailure(NlmrError):
    module = "inference"


class InvalidPve(NlmrError):
    category = ErrorCategory.CONFIG
    module = "simkit"


class TooFewDistinctExposures(NlmrError):
    category = ErrorCategory.DATA
    module = "spmr"


class TooFewObservations(NlmrError):
    category = ErrorCategory.DATA
    module = "spmr"


class ReplicateFailureRate(NlmrError):
    module = "simkit"


# ============================================================================
# Config / data errors
# ============================================================================

class ConfigInvalid(NlmrError):
    """Invalid configuration; message starts with the dotted field path."""
    category = ErrorCategory.CONFIG
    module = "mr_config"

    def __init__(self, field_path: str, problem: str):
        super().__init__(f"{field_path}: {problem}")
        self.field_path = field_path


class MissingColumn(NlmrError):
    category = ErrorCategory.DATA
    module = "mr_io"


class NonNumericCell(NlmrError):
    category = ErrorCategory.DATA
    module = "mr_io"

    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        super().__init__(message)
        self.row = row
        self.column = column


class EmptyAfterFiltering(NlmrError):
    category = ErrorCategory.DATA
    module = "mr_io"
