"""Error types shared by the numerical modules and the harness.

Every error carries a stable `code` so that harness sweeps can record a failure row for one N
and keep going; `classify_error` maps arbitrary exceptions onto the same vocabulary.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional


class BsdeGridError(Exception):
    """Base class for library errors."""

    code = "bsdegrid_error"
    kind = "numerics"


class InvalidParameterError(BsdeGridError, ValueError):
    code = "invalid_parameter"
    kind = "input"


class IndexOutOfRangeError(BsdeGridError, IndexError):
    code = "index_out_of_range"
    kind = "input"


class ConfigError(BsdeGridError, ValueError):
    code = "config_parse"
    kind = "config"


class IllConditionedVolatilityError(BsdeGridError):
    code = "ill_conditioned_volatility"


class SimulationOverflowError(BsdeGridError):
    code = "simulation_overflow"


class SingularTangentError(BsdeGridError):
    code = "singular_tangent"


class UnsupportedModelError(BsdeGridError):
    code = "unsupported_model"


class UnsupportedCombinationError(BsdeGridError):
    code = "unsupported_combination"


class RankDeficientDesignError(BsdeGridError):
    code = "rank_deficient_design"


class MissingReferenceError(BsdeGridError):
    code = "missing_reference"


class ReferenceMismatchError(BsdeGridError):
    code = "reference_mismatch"


class ProviderUndefinedError(BsdeGridError):
    code = "provider_undefined"


class MissingThetaPhiError(BsdeGridError, ValueError):
    code = "missing_theta_phi"
    kind = "input"


class DegeneratePointsError(BsdeGridError, ValueError):
    code = "degenerate_points"
    kind = "input"


class TooLargeError(BsdeGridError):
    code = "too_large"


class SchemeStepError(BsdeGridError):
    """A backend failure inside a backward scheme, tagged with the time index."""

    code = "scheme_step"

    def __init__(self, index: int, cause: Exception):
        self.index = int(index)
        self.cause = cause
        cause_code = getattr(cause, "code", type(cause).__name__)
        super().__init__(f"time index {self.index}: [{cause_code}] {cause}")


@dataclass(frozen=True)
class ErrorInfo:
    code: str
    kind: str
    message: str
    index: Optional[int] = None


def classify_error(exc: Exception) -> ErrorInfo:
    """Classify a failure into a stable code for report rows."""

    text = str(exc)
    if isinstance(exc, SchemeStepError):
        inner = classify_error(exc.cause)
        return ErrorInfo(code=inner.code, kind=inner.kind, message=text, index=exc.index)
    if isinstance(exc, BsdeGridError):
        return ErrorInfo(code=exc.code, kind=exc.kind, message=text)
    if isinstance(exc, FloatingPointError):
        return ErrorInfo(code="floating_point", kind="numerics", message=text)
    if isinstance(exc, MemoryError):
        return ErrorInfo(code="out_of_memory", kind="resources", message=text)
    if isinstance(exc, (OSError, FileNotFoundError)):
        return ErrorInfo(code="io_error", kind="io", message=text)
    if isinstance(exc, ValueError):
        return ErrorInfo(code="value_error", kind="input", message=text)
    return ErrorInfo(code="unknown", kind="unknown", message=text)
