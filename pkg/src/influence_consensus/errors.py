"""Exception hierarchy.

Every error the library raises deliberately derives from
:class:`InfluenceConsensusError`, which lets the CLI map failures to exit
codes without catching unrelated bugs.
"""

from __future__ import annotations


class InfluenceConsensusError(Exception):
    """Base class for all library errors."""


class ValidationError(InfluenceConsensusError, ValueError):
    """Inputs violate a documented precondition."""


class ShardFormatError(ValidationError):
    """A shard file is malformed."""


class BadMagicError(ShardFormatError):
    pass


class UnsupportedFormatError(ShardFormatError):
    """Unknown container version or dtype code."""


class HeaderValidationError(ShardFormatError):
    pass


class TruncatedShardError(ShardFormatError):
    pass


class ChecksumMismatchError(ShardFormatError):
    pass


class NonFiniteValueError(ValidationError):
    """NaN or Inf found where only finite values are allowed."""


class DimensionMismatchError(ValidationError):
    pass


class NormalizationError(ValidationError):
    """Rows expected to be unit-norm are not."""


class TrainingDivergedError(InfluenceConsensusError, FloatingPointError):
    """SGD produced a non-finite parameter."""
