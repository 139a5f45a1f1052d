"""Exception types shared across the synthesis pipeline."""


class MmsynthError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(MmsynthError):
    """A config file or distribution spec is invalid (message is path-qualified)."""


class CorpusError(MmsynthError):
    """Image manifest or embedding files are unusable, or an id is unknown."""


class PromptError(MmsynthError):
    """Template assets, slot resolution, or prompt inputs are inconsistent."""


class GenerationParseError(MmsynthError):
    """Raw model output contains no parsable JSON object."""


class SchemaError(GenerationParseError):
    """A parsed generation is missing required keys or has non-string values."""


class TransportError(MmsynthError):
    """A request failed permanently (retries exhausted or non-retryable status)."""

    def __init__(self, message: str, status: int | None = None, attempts: int = 0):
        super().__init__(message)
        self.status = status
        self.attempts = attempts


class ContractError(MmsynthError):
    """An operation was called with a violated precondition."""


class WriterError(MmsynthError):
    """Shard output failed: duplicate id, lock conflict, or IO error."""
