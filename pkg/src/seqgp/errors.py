"""Exception hierarchy shared by all seqgp modules."""


class SeqGpError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(SeqGpError, ValueError):
    """Operands have incompatible shapes."""


class ConstraintError(SeqGpError, ValueError):
    """A parameter violates its documented constraint (sign, range, ...)."""


class NonSymmetricError(SeqGpError):
    """A matrix or matrix action that must be symmetric is not."""


class SketchWidthError(SeqGpError, ValueError):
    """The sketch width k+p does not fit the matrix dimension."""


class SingularSystemError(SeqGpError):
    """An inner solve hit a (near-)singular system.

    Carries the estimated condition number of the offending matrix.
    """

    def __init__(self, message, cond=None):
        super().__init__(message)
        self.cond = cond


class DataError(SeqGpError):
    """Dataset ingestion failed (missing file, malformed rows, ...)."""


class ConfigError(SeqGpError):
    """An experiment configuration is missing keys or internally inconsistent."""
