#!/usr/bin/env python3
"""
Exception catalog for the AF-RPN toolkit.

Every error raised by the library derives from AfrpnError so the CLI can
map whole families of failures to exit codes in one place. Value-type
errors also derive from ValueError for callers that only care about that.
"""

from typing import Any, Dict, Optional


class AfrpnError(Exception):
    """Base class for all toolkit errors."""


class DegenerateQuad(AfrpnError, ValueError):
    """Quadrilateral has (near) zero area or intersects itself."""

    def __init__(self, message: str, line_no: Optional[int] = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class InvalidFactor(AfrpnError, ValueError):
    """Shrink factor outside (0, 1]."""


class InvalidNorm(AfrpnError, ValueError):
    """Regression normalizer is not strictly positive."""


class ShapeError(AfrpnError, ValueError):
    """Tensor shapes do not agree."""


class EmptyBatch(AfrpnError):
    """A loss or sampler received nothing to work with."""


class ParseError(AfrpnError, ValueError):
    """Malformed annotation line."""

    def __init__(self, message: str, line_no: int):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class FormatError(AfrpnError, ValueError):
    """Unreadable image or checkpoint file."""


class JoinError(AfrpnError):
    """Predictions reference images that the ground truth does not have."""


class CompatError(AfrpnError):
    """Checkpoint does not match the model built from the configuration."""


class UsageError(AfrpnError):
    """Bad command-line usage."""


class ConfigError(UsageError):
    """Unknown or ill-typed configuration key."""


class NumericalFailure(AfrpnError):
    """Training or gradient checking produced non-finite or out-of-tolerance values."""

    def __init__(self, message: str, record: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.record = record or {}
