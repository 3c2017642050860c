"""Exceptions shared across the pipeline."""

from __future__ import annotations


class ConfigError(ValueError):
    """A configuration value failed validation.

    ``field`` is the dotted ``section.key`` name that failed.
    """

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class MissingArtifactError(FileNotFoundError):
    """An upstream artifact is absent; the message names the command that makes it."""

    def __init__(self, what: str, path, command: str):
        self.path = path
        self.command = command
        super().__init__(f"{what} not found at {path}; run `{command}` first")


class TrainingDivergedError(RuntimeError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component: str, value: float):
        self.component = component
        super().__init__(f"non-finite {component} term in ELBO: {value}")
