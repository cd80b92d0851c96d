"""Exception hierarchy shared across the package.

The CLI maps QualsegError subclasses to exit code 1; anything else is a bug.
"""


class QualsegError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(QualsegError):
    """The command line was malformed or incomplete (exit code 2)."""


class LoadError(QualsegError):
    """A referenced file is missing or unreadable."""


class ValidationError(QualsegError):
    """Input data violates a documented invariant."""


class ConfigError(QualsegError):
    """A configuration value is out of its allowed range."""


class ShapeError(QualsegError):
    """Array arguments have incompatible shapes."""


class TrainingError(QualsegError):
    """Optimization failed (e.g. a non-finite loss)."""
