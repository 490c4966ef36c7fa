"""Exception types shared across the package."""


class MetaMaskError(Exception):
    """Base class for all library errors."""


class ShapeError(MetaMaskError):
    """Operands have incompatible or unexpected shapes."""


class DomainError(MetaMaskError):
    """A value is outside the mathematical domain of an operation."""


class LineageError(MetaMaskError):
    """A differentiation target is not an ancestor of the loss node."""


class ConfigError(MetaMaskError):
    """An invalid configuration value or combination."""


class ParseError(MetaMaskError):
    """A file could not be parsed (bad magic, truncation, inconsistency)."""


class DivergenceError(MetaMaskError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
