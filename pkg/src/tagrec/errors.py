"""Exception hierarchy shared across the package."""

from __future__ import annotations


class TagrecError(Exception):
    """Base class for all package errors."""


class ValidationError(TagrecError):
    """A record or argument failed schema validation."""


class RangeError(TagrecError):
    """An interval argument was inverted or out of bounds."""


class CompressionError(TagrecError):
    """An event could not be projected into a compressed item."""


class TemplateError(TagrecError):
    """A prompt template binding was incomplete or malformed."""


class ParseError(TagrecError):
    """Structured output could not be parsed, even after repair.

    Carries the raw model text so it can be routed to the judge buffer.
    """

    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


class TransportError(TagrecError):
    """Provider call failed after exhausting retries."""


class ContentError(TagrecError):
    """Provider refused or returned an unusable payload."""


class PromptTooLongError(TagrecError):
    """Instantiated prompt exceeds the configured context limit."""


class ConfigurationError(TagrecError):
    """Model or pipeline configuration is internally inconsistent."""


class TrainingDivergedError(TagrecError):
    """Loss became non-finite during optimization."""

    def __init__(self, message: str, step: int, history: list[float]):
        super().__init__(message)
        self.step = step
        self.history = history


class StageError(TagrecError):
    """A pipeline stage failed; carries the stage name for diagnostics."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
