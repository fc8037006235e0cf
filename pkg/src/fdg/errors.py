"""Exception hierarchy shared by every module."""


class FdgError(Exception):
    """Base class for all package errors."""


class UsageError(FdgError, ValueError):
    """Caller passed arguments that violate an operation's preconditions."""


class ConfigurationError(FdgError, ValueError):
    """A configuration or dataset cannot support the requested operation."""


class FormatError(FdgError):
    """A file on disk is malformed, truncated or inconsistent."""


class NumericalError(FdgError, ArithmeticError):
    """A computation produced or met a non-finite or degenerate value."""


class TrainingError(NumericalError):
    """Training hit a non-finite gradient or loss."""

    def __init__(self, message, iteration=None):
        super().__init__(message if iteration is None else f"{message} (iteration {iteration})")
        self.iteration = iteration
