"""Exception hierarchy shared by the library and the CLI."""

from __future__ import annotations

from typing import Optional


class GlimpseError(RuntimeError):
    """Base class for every error raised by glimpse_cli."""


class ConfigurationError(GlimpseError, ValueError):
    """Invalid environment, reward, search or training configuration."""


class DomainError(GlimpseError, ValueError):
    """A value lies outside its domain (answer class, object reference, ...)."""


class StateError(GlimpseError):
    """An operation was applied to a state that does not admit it."""


class MonotonicityError(StateError):
    """A selection moved backwards in time (t < t_cur)."""


class DataIntegrityError(GlimpseError):
    """A stored record cannot be replayed against its episode."""


class FeasibilityError(GlimpseError):
    def __init__(self, message: str, count: int) -> None:
        super().__init__(message)
        self.count = count


class TrainingError(GlimpseError):
    """Training diverged; `last_good` holds the parameters before the failing step."""

    def __init__(self, message: str, last_good: Optional[object] = None) -> None:
        super().__init__(message)
        self.last_good = last_good


class DependencyError(GlimpseError):
    def __init__(self, message: str, missing: Optional[str] = None) -> None:
        super().__init__(message)
        self.missing = missing


class UsageError(GlimpseError):
    """The command line asked for something out of order or out of range."""
