"""Exception hierarchy shared across the package."""


class KeyframeError(Exception):
    """Base class for all package errors."""


class ConfigError(KeyframeError, ValueError):
    """A configuration or spec violates its invariants."""


class InputError(KeyframeError, ValueError):
    """An operation received malformed input."""


class NumericalError(KeyframeError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""

    def __init__(self, message: str, episode_id=None):
        if episode_id is not None:
            message = f"{message} (episode {episode_id})"
        super().__init__(message)
        self.episode_id = episode_id
