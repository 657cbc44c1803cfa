"""Shared exception hierarchy.

Exit-code mapping used by the CLI: ValidationError -> 1, DataError -> 2,
anything else -> 3.
"""


class TaskrecError(Exception):
    """Base class for all library errors."""


class ValidationError(TaskrecError):
    """Bad configuration or arguments."""


class DataError(TaskrecError):
    """Unreadable, empty, or inconsistent input data."""


class UnknownCommandError(TaskrecError):
    """A command string or id is outside the active vocabulary."""


class VocabularyMismatchError(TaskrecError):
    """A persisted model was built against a different vocabulary."""
