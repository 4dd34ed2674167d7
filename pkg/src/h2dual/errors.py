"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """An instance, restriction or plan is malformed."""


class CapacityError(ValueError):
    """A requested computation is too large for the chosen grid."""


class ConvergenceError(RuntimeError):
    """An iterative method stopped without meeting its tolerance.

    ``span`` holds the last observed span of successive differences.
    """

    def __init__(self, message, span=float("nan"), iterations=0):
        super().__init__(message)
        self.span = span
        self.iterations = iterations
