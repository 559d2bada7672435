"""Exceptions raised by the LC-Net engine."""

from __future__ import annotations

from collections.abc import Sequence


class LCNetError(Exception):
    """Base class for all engine errors."""


class ShapeError(LCNetError):
    """Exception raised when operand shapes are incompatible."""

    def __init__(self, op: str, *shapes: Sequence[int], detail: str | None = None) -> None:
        """Initialize the exception."""
        self.op = op
        self.shapes = tuple(tuple(shape) for shape in shapes)
        rendered = " vs ".join(str(shape) for shape in self.shapes)
        message = f"{op}: incompatible shapes {rendered}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)


class NumericError(LCNetError):
    """Exception raised when a NaN or Inf value is detected."""

    def __init__(self, where: str, count: int) -> None:
        """Initialize the exception."""
        self.where = where
        self.count = count
        super().__init__(f"{count} non-finite value(s) in {where}")


class TapeError(LCNetError):
    """Exception raised for invalid backward passes."""


class DataError(LCNetError):
    """Exception raised for unreadable or inconsistent datasets."""


class CheckpointError(LCNetError):
    """Exception raised for unreadable or inconsistent checkpoints."""


class TraceError(LCNetError):
    """Exception raised when a trace does not match the network it claims to describe."""
