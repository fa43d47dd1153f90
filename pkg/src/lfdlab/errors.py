"""Exception hierarchy shared across the package."""

from __future__ import annotations


class LabError(Exception):
    """Base class for every error raised by lfdlab."""


# numerics
class AllNegInfError(LabError, ValueError):
    pass


class LengthMismatchError(LabError, ValueError):
    pass


class InvalidDistributionError(LabError, ValueError):
    pass


class ZeroVectorError(LabError, ValueError):
    pass


class RankOutOfRangeError(LabError, ValueError):
    pass


# model
class ConfigInvalidError(LabError, ValueError):
    pass


class PositionOutOfRangeError(LabError, IndexError):
    pass


class SequenceTooLongError(LabError, ValueError):
    pass


class CacheMismatchError(LabError, ValueError):
    pass


class DimensionMismatchError(LabError, ValueError):
    pass


# analysis
class TemplateUnknownError(LabError, KeyError):
    pass


class SpanOutOfBoundsError(LabError, ValueError):
    pass


class NoAnswerSpansError(LabError, ValueError):
    pass


class EmptyCorpusError(LabError, ValueError):
    pass


# decoding
class EmptyCandidateSetError(LabError, ValueError):
    pass


# harness
class ParseError(LabError, ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class SchemaError(LabError, ValueError):
    def __init__(self, line: int, field: str, message: str):
        super().__init__(f"line {line}: field {field!r}: {message}")
        self.line = line
        self.field = field


class PreconditionError(LabError, ValueError):
    pass
