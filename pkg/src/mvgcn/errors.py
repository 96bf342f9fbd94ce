"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """An argument violates an operation's precondition."""


class ConvergenceError(RuntimeError):
    """An iterative method ran out of iterations.

    Parameters
    ----------
    message : str
        Human-readable description.
    last_estimate : float
        The estimate held when iteration stopped.
    """

    def __init__(self, message, last_estimate):
        super().__init__(message)
        self.last_estimate = last_estimate


class DegenerateGraphError(InvalidInputError):
    """The graph has no edges, so no spectral operator exists."""


class DataFormatError(InvalidInputError):
    """A file on disk could not be parsed.

    The message always names the offending file and, where it applies, the line.
    """


class DataWarning(UserWarning):
    """Recoverable oddity in input data (asymmetric or all-zero matrices)."""
