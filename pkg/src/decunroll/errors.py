"""Exception types shared across the package."""


class DecUnrollError(Exception):
    """Base class for all package errors."""


class ParameterError(DecUnrollError, ValueError):
    """An argument is outside its admissible range."""


class ValidationError(DecUnrollError, ValueError):
    """An input object violates a structural invariant."""


class NotPSDError(DecUnrollError, ValueError):
    """A matrix expected to be positive semidefinite has a negative eigenvalue."""


class ParseError(DecUnrollError, ValueError):
    """A serialized document is malformed.

    Parameters
    ----------
    message : str
        Human readable description.
    line : int, optional
        1-based line number where parsing failed.
    """

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class StateError(DecUnrollError, RuntimeError):
    """A solver state lacks the history required by a step."""


class DivergenceError(DecUnrollError, ArithmeticError):
    """A non-finite value appeared in an iterate.

    Attributes
    ----------
    iteration : int
        Index of the first iterate found to be non-finite.
    """

    def __init__(self, iteration, message=None):
        self.iteration = iteration
        super().__init__(message or f"non-finite iterate at iteration {iteration}")


class ConvergenceError(DecUnrollError, RuntimeError):
    """An iterative routine hit its budget before reaching tolerance."""

    def __init__(self, message, residual=None):
        self.residual = residual
        super().__init__(message)
