"""Exception types raised across the package."""


class NQMError(Exception):
    """Base class for package errors."""


class DimensionError(NQMError, ValueError):
    """Input or parameter shapes do not match."""


class AssumptionError(NQMError, ValueError):
    """Data violates a structural assumption (e.g. 1-D inputs, not all zero)."""


class DegenerateKernelError(NQMError, ValueError):
    """The tangent kernel has no positive eigenvalue."""


class NumericError(NQMError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class DivergenceSignal(NQMError, ArithmeticError):
    """A gradient step produced non-finite parameters.

    Carries the step index; simulation loops catch it and record divergence.
    """

    def __init__(self, step):
        super().__init__(f"non-finite update at step {step}")
        self.step = step


class ConfigError(NQMError, ValueError):
    """Configuration failed validation; ``path`` names the offending field."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path
