"""Exception taxonomy shared across the package."""

from __future__ import annotations


class CacheFedError(Exception):
    """Base class for all package errors."""


class ShapeError(CacheFedError):
    """Operand dimensions are incompatible."""


class LabelError(CacheFedError):
    """A class label is outside the valid range."""


class DegenerateInputError(CacheFedError):
    """Input is structurally valid but degenerate (zero row, empty set)."""


class BalanceError(CacheFedError):
    """A dataset that must be exactly class-balanced is not."""

    def __init__(self, message: str, counts: dict[int, int] | None = None):
        super().__init__(message)
        self.counts = dict(counts) if counts else {}


class FormatError(CacheFedError):
    """A binary file does not conform to its format; carries a byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class InfeasibleError(CacheFedError):
    """The requested partition cannot be constructed."""


class SamplingError(CacheFedError):
    """Client sampling cannot satisfy the request."""


class AggregationError(CacheFedError):
    """Aggregation received no usable updates."""


class DivergenceError(CacheFedError):
    """A trajectory exceeded the divergence guard."""
