"""Exception types shared across the package."""


class RailError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(RailError, ValueError):
    """Invalid configuration; the message names the offending field."""


class DomainError(RailError, ValueError):
    """Operation called with incompatible values (bad action id, shape mismatch)."""


class StateError(RailError, RuntimeError):
    """Operation called in an invalid state, e.g. stepping a finished episode."""


class FormatError(RailError, ValueError):
    """Malformed checkpoint or demonstration file."""


class EngineError(RailError, RuntimeError):
    """A rollout worker failed; carries the failing (direction, sign) key."""

    def __init__(self, message, direction=None, sign=None):
        super().__init__(message)
        self.direction = direction
        self.sign = sign


class TrainingHalted(RailError, RuntimeError):
    """Training stopped on a non-finite reward; carries a state dump dict."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}
