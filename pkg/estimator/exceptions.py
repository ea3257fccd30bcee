"""
Error hierarchy for the age-range pipeline.

Management commands map these onto exit codes: ConfigError -> 1,
DataError -> 2, NumericError -> 3.
"""


class AgeEstimatorError(Exception):
    """Base class for every error raised by the estimator app."""


class ConfigError(AgeEstimatorError):
    """Invalid or unparseable pipeline configuration (usage error)."""

    def __init__(self, message, errors=None):
        super().__init__(message)
        self.errors = errors or {}


class DataError(AgeEstimatorError):
    """Input data or an upstream artifact is missing or malformed."""


class MissingArtifactError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


class WeightFormatError(DataError):
    """Base class for portable weight file problems."""


class MagicMismatchError(WeightFormatError):
    pass


class VersionMismatchError(WeightFormatError):
    pass


class TruncatedFileError(WeightFormatError):
    pass


class UnknownLayerError(WeightFormatError):
    pass


class DimensionMismatchError(WeightFormatError):
    pass


class MissingTensorError(WeightFormatError):
    pass


class ShapeError(AgeEstimatorError, ValueError):
    """Tensor shapes do not compose."""


class InvalidBoxError(AgeEstimatorError, ValueError):
    """Degenerate or zero-area bounding box."""


class NumericError(AgeEstimatorError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class ModelNotLoadedError(AgeEstimatorError):
    pass
