"""Exception hierarchy shared by every debal module."""


class DebalError(Exception):
    """Base class for all errors raised by debal."""


class ContractError(DebalError, ValueError):
    """A precondition or shape contract was violated by the caller."""


class ParseError(DebalError, ValueError):
    """An input file could not be parsed."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}".strip() if where else message)


class ValidationError(DebalError, ValueError):
    """Parsed data violates a table invariant (index range, duplicates, scale)."""


class SplitError(DebalError, ValueError):
    """A table is too small for the requested split."""


class GenerationError(DebalError, ValueError):
    """A synthetic-world configuration produces invalid probabilities."""


class UndefinedMetricError(DebalError, ValueError):
    """A ranking metric is undefined for the given labels."""


class NumericError(DebalError, ArithmeticError):
    """A non-finite value appeared during a computation.

    ``context`` carries whatever diagnostics the raiser had at hand, for
    instance the offending (user, item) pair or the training step.
    """

    def __init__(self, message, **context):
        self.context = context
        super().__init__(message)


class InfeasibleError(DebalError, ValueError):
    """The balance problem has no solution; ``interval`` is the achievable range."""

    def __init__(self, message, interval):
        self.interval = interval
        super().__init__(message)


class ConvergenceError(DebalError, RuntimeError):
    """An iterative solver stopped before reaching its tolerance."""

    def __init__(self, message, residual):
        self.residual = residual
        super().__init__(message)
