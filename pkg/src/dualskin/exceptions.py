"""Exception hierarchy shared across the package.

The CLI maps these to exit codes: validation, input and configuration
problems exit with 1, a training abort exits with 2.
"""


class DualSkinError(Exception):
    """Base class for package errors."""


class ValidationError(DualSkinError, ValueError):
    """Data or arguments violate a documented contract."""


class InputError(DualSkinError, OSError):
    """A file is missing, unreadable or not writable."""


class ConfigError(DualSkinError, ValueError):
    """Inconsistent or out-of-range configuration."""


class TrainingAbort(DualSkinError, RuntimeError):
    """Optimization hit a non-finite loss."""

    def __init__(self, message, term=None, step=None):
        super().__init__(message)
        self.term = term
        self.step = step
