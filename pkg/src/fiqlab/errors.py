"""Exception hierarchy shared by all fiqlab modules.

The CLI maps these onto exit codes: ConfigError/DomainError -> 1,
StructuralError/FormatError -> 2, NumericError -> 3.
"""


class FiqError(Exception):
    """Base class for all fiqlab errors."""


class ConfigError(FiqError):
    """Invalid configuration value or unparseable config file."""


class DomainError(FiqError):
    """Argument outside the mathematical domain of an operation."""


class StructuralError(FiqError):
    """Shape, index, or contract mismatch between data structures."""


class StaleCacheError(StructuralError):
    """Backward pass invoked with a cache from a different forward."""


class FormatError(FiqError):
    """Corrupt or truncated container/checkpoint file."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(FiqError):
    """Non-finite or degenerate numerical state."""


class DegenerateEmbeddingError(NumericError):
    """Pre-normalization vector too close to zero to normalize safely."""


class UndefinedFnmrError(DomainError):
    """FNMR requested on an empty kept set (all mated pairs rejected)."""


class UndefinedCorrelationError(DomainError):
    """Correlation requested on a constant input sequence."""
