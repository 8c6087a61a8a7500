"""Exception types shared across the package."""
from __future__ import annotations


class PartvoxError(Exception):
    """Base class for all package errors."""


class EmptyInput(PartvoxError, ValueError):
    pass


class OutOfBounds(PartvoxError, ValueError):
    pass


class ResolutionMismatch(PartvoxError, ValueError):
    pass


class UnknownPart(PartvoxError, KeyError):
    pass


class MissingLabels(PartvoxError, ValueError):
    pass


class Malformed(PartvoxError, ValueError):
    pass


class InvalidBox(PartvoxError, ValueError):
    def __init__(self, message: str, box_index: int | None = None):
        super().__init__(message)
        self.box_index = box_index


class ShapeError(PartvoxError, ValueError):
    pass


class NumericalError(PartvoxError, ArithmeticError):
    pass


class LabelOverflow(PartvoxError, ValueError):
    pass


class MissingBox(PartvoxError, ValueError):
    pass


class DomainError(PartvoxError, ValueError):
    pass


class PpeError(PartvoxError, ValueError):
    pass


class EmptyPart(PartvoxError, ValueError):
    pass


class DegenerateShape(PartvoxError, ValueError):
    pass


class GenerationFailed(PartvoxError, RuntimeError):
    pass


class StratificationError(PartvoxError, ValueError):
    pass


class ConfigError(PartvoxError, ValueError):
    pass


class TruncatedSequence(UserWarning):
    """Decoding hit its token budget before emitting EOS; a partial result was returned."""


class EmptyBoxWarning(UserWarning):
    """A planned box contained no active voxels and was skipped."""
