"""Exception types shared across the package.

The CLI maps these onto process exit codes (see ``cli.EXIT_CODES``).
"""


class CUError(Exception):
    """Base class for all package errors."""


class InvalidInputError(CUError, ValueError):
    pass


class NotFoundError(CUError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "not found"


class ConfigurationError(CUError, ValueError):
    pass


class BackendError(CUError, RuntimeError):
    """Embedding backend failure; carries the hex digest of the offending chunk."""

    def __init__(self, message, chunk_hash=None):
        super().__init__(message if chunk_hash is None else f"{message} [chunk {chunk_hash}]")
        self.chunk_hash = chunk_hash


class TrainingDivergenceError(CUError, RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
