"""Exception hierarchy shared across the pipeline.

Each error class carries the process exit code the CLI maps it to:
2 usage, 3 data integrity, 4 I/O.
"""


class CloneSearchError(Exception):
    """Base class for all clonesearch errors."""

    exit_code = 1


class UsageError(CloneSearchError):
    """Bad arguments or configuration."""

    exit_code = 2


class IntegrityError(CloneSearchError):
    """Index, cache, and metadata disagree with each other."""

    exit_code = 3


class StorageError(CloneSearchError):
    """Filesystem or database failure."""

    exit_code = 4


class EmbedServiceError(CloneSearchError):
    """Remote embedding endpoint failed after retries.

    ``completed`` counts fragments already embedded before the failure so
    the indexing checkpoint can resume from there.
    """

    exit_code = 4

    def __init__(self, message: str, completed: int = 0):
        super().__init__(message)
        self.completed = completed
