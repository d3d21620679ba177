"""Exception hierarchy.

The CLI maps the three families below onto exit codes: configuration
problems exit 2, bad or missing data exits 3, numeric aborts exit 4.
"""


class LeafError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(LeafError, ValueError):
    """Invalid configuration or incompatible settings."""


class DataError(LeafError, ValueError):
    """Malformed input data, files or lookups."""


class NumericError(LeafError, ArithmeticError):
    """Non-finite values or degenerate numerics."""


class DimensionError(ConfigError):
    """Operand shapes do not compose."""


class EmptyPoolError(DataError):
    """Pooling was requested over an all-masked row."""


class DistributionError(DataError):
    """Rows that should be probability distributions are not."""


class CompatibilityError(ConfigError):
    """Student and teacher cannot be paired for the requested loss."""


class MappingError(ConfigError):
    """The student-to-teacher layer map is not well defined."""


class VocabError(DataError):
    """Token id outside the vocabulary."""


class CacheFormatError(DataError):
    """Embedding cache file is corrupt or inconsistent."""


class LookupMissError(DataError, KeyError):
    """Requested id is not in the cache."""


class CheckpointFormatError(DataError):
    """Checkpoint file is corrupt or of an unknown version."""


class FitError(NumericError):
    """Line fit is degenerate."""


class EvaluationError(NumericError):
    """A function under gradient check returned a non-finite value."""
