"""Exception hierarchy.

Every error carries the CLI exit code it maps to: 2 for configuration
problems, 3 for bad data, 4 for numeric or training failures.
"""


class FluxnetError(Exception):
    exit_code = 1


class ConfigError(FluxnetError, ValueError):
    exit_code = 2


class ParameterError(ConfigError):
    pass


class DataError(FluxnetError, ValueError):
    exit_code = 3


class DomainError(DataError):
    pass


class ShapeError(DataError):
    pass


class NormalizationError(DataError):
    pass


class MetricError(DataError):
    pass


class ReportError(DataError):
    pass


class SchemaError(DataError):
    """Model or data file failed validation (bad format, checksum, version)."""


class IncompatibleModelError(SchemaError):
    """A model file holds a different kind of model than the caller expected."""


class NumericError(FluxnetError, ArithmeticError):
    exit_code = 4

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class TrainingError(NumericError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history


class SearchError(FluxnetError):
    exit_code = 4

    def __init__(self, message, trials=None):
        super().__init__(message)
        self.trials = trials or []
