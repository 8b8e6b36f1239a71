"""Exception hierarchy shared by all modules."""


class CrossFactorialError(Exception):
    """Base class for package errors."""


class StructuralError(CrossFactorialError):
    """The factor structure is inconsistent or not orthogonal."""


class ConfigurationError(CrossFactorialError, ValueError):
    """Invalid design counts, simulation settings or missing inputs."""


class UsageError(CrossFactorialError, ValueError):
    """Arguments are individually valid but cannot be combined."""


class BindingError(CrossFactorialError, KeyError):
    """A formula identifier does not name a design column."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class ParseError(CrossFactorialError, ValueError):
    """Malformed formula text.

    Parameters
    ----------
    message : str
        Human readable description.
    offset : int
        Byte offset into the UTF-8 encoded formula where the problem was found.
    """

    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (at byte {offset})")


class NumericalError(CrossFactorialError, ArithmeticError):
    """An iterative fit failed to converge."""
