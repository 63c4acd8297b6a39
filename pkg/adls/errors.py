"""Exception types raised by adls.

Every failure the library reports on purpose derives from AdlsError, so the
CLI can turn it into a one-line message. Plain I/O failures stay OSError.
"""


class AdlsError(Exception):
    """Base class for adls errors."""


class InvalidPlanError(AdlsError, ValueError):
    """Sampling plan or phase allocation is inconsistent."""


class ConfigError(AdlsError, ValueError):
    """Configuration file or scenario setup is unusable."""


class FormatError(AdlsError, ValueError):
    """File content does not match the expected format."""


class CorruptError(AdlsError, ValueError):
    """File is truncated or internally inconsistent."""


class DepthRangeError(AdlsError, ValueError):
    """Depth cannot be represented in the 16-bit PNG encoding."""


class DimensionError(AdlsError, ValueError):
    """Array or image dimensions do not agree."""


class FitError(AdlsError):
    """A regression tree or forest could not be trained."""


class InsufficientEnsembleError(AdlsError):
    """Fewer than two ensemble members to take a variance over."""


class NoCandidatesError(AdlsError):
    """Sampling support is empty."""


class EmptySceneError(AdlsError):
    """Scene has no pixel with valid ground truth."""


class DataError(AdlsError, ValueError):
    """Values make a metric undefined."""


class DomainError(AdlsError, ValueError):
    """Input lies outside the mathematical domain of an operation."""


class UndefinedCorrelationError(AdlsError):
    """Correlation of a constant series was requested."""


class ScenarioMismatchError(AdlsError):
    """Scene and trained pipeline disagree on the input scenario."""
