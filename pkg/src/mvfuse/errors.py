class ConfigError(ValueError):
    """Invalid configuration or parameters (CLI exit code 2)."""


class CorpusIOError(OSError):
    """Missing or unreadable corpus/checkpoint/run files (CLI exit code 3)."""


class NumericAbort(RuntimeError):
    """Non-finite loss during training (CLI exit code 4)."""

    def __init__(self, message: str, dump: dict | None = None):
        super().__init__(message)
        self.dump = dump or {}
