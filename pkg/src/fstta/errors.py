"""Exception types shared across the package."""


class DataValidityError(ValueError):
    """Input data is malformed: wrong shape, non-finite entries, asymmetry."""


class NumericalError(ArithmeticError):
    """An iterative numerical routine failed to converge."""


class InsufficientWindowError(ValueError):
    """A gradient window holds too few entries to form a covariance."""


class TrainingError(RuntimeError):
    """Pretraining did not reach the requested accuracy."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConfigError(ValueError):
    """A configuration field is missing or has an invalid value."""


class SchemaError(ValueError):
    """A results file carries an unsupported or mismatched schema version."""
