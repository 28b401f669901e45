"""Shared exception types."""


class ConfigError(Exception):
    """Invalid configuration or argument values."""


class DataFormatError(Exception):
    """Malformed dataset or checkpoint file."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ArtifactMismatchError(Exception):
    """Checkpoint and dataset/config disagree on shapes or counts."""
