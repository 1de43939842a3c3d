"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: configuration/validation problems exit
with 1, numerical failures with 2.
"""


class DomainError(ValueError):
    """An argument is outside the mathematical domain of an operation."""


class ConfigurationError(ValueError):
    """A config, fixture, or model is structurally unusable for the request."""


class NumericalError(ArithmeticError):
    """A computation degenerated (non-finite values, refused divisions)."""


class UnsupportedDimensionError(DomainError):
    """Grid quadrature is only available in low dimension."""


class TrainingDiverged(NumericalError):
    """A training loop exceeded its divergence guard."""

    def __init__(self, message: str, loss_trace=None):
        super().__init__(message)
        self.loss_trace = loss_trace
