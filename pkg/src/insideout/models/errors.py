"""Error types for the tracking toolkit."""

from enum import Enum
from typing import Any

from pydantic import BaseModel


class ErrorCode(str, Enum):
    """Error categories reported by every module and by the CLI."""

    BEHIND_CAMERA = "BEHIND_CAMERA"
    NO_CONVERGENCE = "NO_CONVERGENCE"
    DEGENERATE_GEOMETRY = "DEGENERATE_GEOMETRY"
    DEGENERATE_CONFIGURATION = "DEGENERATE_CONFIGURATION"
    INSUFFICIENT_VIEWS = "INSUFFICIENT_VIEWS"
    INSUFFICIENT_MOTIONS = "INSUFFICIENT_MOTIONS"
    UNOBSERVABLE_AXIS = "UNOBSERVABLE_AXIS"
    INSUFFICIENT_CORRESPONDENCES = "INSUFFICIENT_CORRESPONDENCES"
    INIT_FAILURE = "INIT_FAILURE"
    NO_CONSENSUS = "NO_CONSENSUS"
    UNOBSERVABLE_LATENCY = "UNOBSERVABLE_LATENCY"
    INSUFFICIENT_OVERLAP = "INSUFFICIENT_OVERLAP"
    OUT_OF_RANGE = "OUT_OF_RANGE"
    NON_MONOTONIC_TIMESTAMPS = "NON_MONOTONIC_TIMESTAMPS"
    EMPTY_VOLUME = "EMPTY_VOLUME"
    INSUFFICIENT_DATA = "INSUFFICIENT_DATA"
    INCOMPLETE_CHAIN = "INCOMPLETE_CHAIN"
    EMPTY_INPUT = "EMPTY_INPUT"
    NO_VALID_PAIRS = "NO_VALID_PAIRS"
    LENGTH_MISMATCH = "LENGTH_MISMATCH"
    INVALID_INPUT = "INVALID_INPUT"
    INVALID_CONFIG = "INVALID_CONFIG"
    FILE_FORMAT = "FILE_FORMAT"


class ErrorDetail(BaseModel):
    """Structured error details."""

    code: ErrorCode
    message: str
    details: dict[str, Any] | None = None


class InsideOutError(Exception):
    """Base exception for all toolkit errors."""

    def __init__(self, code: ErrorCode, message: str, details: dict[str, Any] | None = None):
        self.code = code
        self.message = message
        self.details = details or {}
        super().__init__(message)

    def to_detail(self) -> ErrorDetail:
        """Convert to the structured error model."""
        return ErrorDetail(
            code=self.code,
            message=self.message,
            details=self.details if self.details else None,
        )

    def error_line(self) -> str:
        """One-line, category-named rendering used by the CLI."""
        return f"error[{self.code.value}]: {self.message}"
