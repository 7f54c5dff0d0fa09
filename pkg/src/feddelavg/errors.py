"""Exception hierarchy shared by the simulator, the bound engine and the CLI."""


class FedDelAvgError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(FedDelAvgError, ValueError):
    """Invalid configuration, dimensions or user input.

    ``path`` is the dotted location of the offending field when known.
    """

    def __init__(self, message, path=None):
        self.path = path
        if path:
            message = f"{path}: {message}"
        super().__init__(message)


class InvariantError(FedDelAvgError, ValueError):
    """A structural invariant (e.g. weights summing to one) does not hold."""


class PreconditionError(ConfigError):
    """A bound was requested outside the region where it is valid."""


class BoundDivergenceError(PreconditionError):
    """The deviation bound is infinite, which happens when alpha is zero."""


class NumericalError(FedDelAvgError, ArithmeticError):
    """Non-finite values or divergence during an iterative computation."""


class LogicError(FedDelAvgError, RuntimeError):
    """An internal sequencing contract was violated."""


class ParseError(FedDelAvgError, ValueError):
    """Malformed binary input; ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class UnsupportedMetricError(ConfigError):
    """A metric was requested for a model kind that cannot produce it."""
