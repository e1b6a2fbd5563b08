"""Exception types shared across the package."""


class KtcfError(Exception):
    """Base class for all errors raised by this package."""


class InputError(KtcfError):
    """Invalid argument values or inconsistent shapes/indices."""


class ConfigError(KtcfError):
    """Invalid configuration (unknown strategy, bad hyperparameter, ...)."""


class FormatError(KtcfError):
    """Malformed or incompatible file content.

    ``line`` is the 1-based line number for text formats, or None.
    """

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NoActionableChangeError(InputError):
    """The history has no actionable position (nothing incorrect to fix)."""
