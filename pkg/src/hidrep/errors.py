"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when arguments violate an operation's preconditions."""


class ParseError(ValueError):
    """Raised on malformed dataset or embedding files.

    ``line`` is the 1-based line number of the offending input line, or
    ``None`` when the problem is not tied to a single line.
    """

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConvergenceError(RuntimeError):
    """Raised when an iterative solver exhausts its iteration budget.

    The best iterate seen and its stopping statistic are kept so callers can
    decide whether to accept a partially converged solution.
    """

    def __init__(self, message, best=None, residual=float("nan")):
        super().__init__(message)
        self.best = best
        self.residual = residual


class DivergenceError(RuntimeError):
    """Raised when training produces non-finite values."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch
