"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input data, configuration or parameters violate a model invariant."""


class ConvergenceError(RuntimeError):
    """An optimizer failed to reach its stopping criterion."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
