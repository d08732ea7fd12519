from __future__ import annotations


class DivergenceError(RuntimeError):
    """Raised when training produces non-finite losses, gradients or parameters."""


class BufferEmptyError(RuntimeError):
    """A loss needs samples from a buffer that has none yet."""


class EpisodeDoneError(RuntimeError):
    """``step`` was called on an environment whose episode has ended."""


class NotFinetunableError(ValueError):
    """A recorded trace has a zero-variance step, so its log-density is undefined."""


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"config key '{key}': {message}")
        self.key = key
