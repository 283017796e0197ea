"""Exception hierarchy; the CLI maps each branch to its own exit code."""


class SimEvalError(Exception):
    """Base class for all package errors."""


class ConfigError(SimEvalError):
    """Invalid configuration or parameters."""


class DataError(SimEvalError):
    """Malformed or inconsistent input data."""


class IngestionError(DataError):
    def __init__(self, row, cause):
        self.row = row
        self.cause = cause
        super().__init__(f"{cause} at row {row}")


class ComputationError(SimEvalError):
    """A numerical stage failed (fitting, explaining, scoring)."""


class FitError(ComputationError):
    pass


class ExplainerError(ComputationError):
    pass


class MetricError(ComputationError):
    """Metric undefined for the given inputs (e.g. zero possible revenue)."""
