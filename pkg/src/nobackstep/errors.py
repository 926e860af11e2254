"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit 2,
numerical divergence exits 3 and file/format problems exit 4.
"""


class BackstepError(Exception):
    """Base class for all package errors."""


class ConfigurationError(BackstepError, ValueError):
    """Invalid physical or numerical settings (CFL, bounds, shapes)."""


class InvalidFieldError(ConfigurationError):
    """A field holds non-finite values or has the wrong length."""


class GridMismatchError(ConfigurationError):
    """Two objects that must share a grid do not."""


class DivergenceError(BackstepError, ArithmeticError):
    """A simulation or solve produced non-finite numbers."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ConvergenceError(BackstepError, ArithmeticError):
    """An iterative solve did not reach its tolerance."""


class FormatError(BackstepError, OSError):
    """A model, dataset or trace file is malformed."""
