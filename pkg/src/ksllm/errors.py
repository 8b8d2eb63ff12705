"""Exception hierarchy shared across the pipeline."""


class KsLlmError(Exception):
    """Base class for all package errors."""


class InputError(KsLlmError, ValueError):
    """A caller passed something that violates an operation's precondition."""


class ProtocolError(KsLlmError):
    """A remote service answered, but not in the agreed shape."""


class TransportError(KsLlmError):
    """A remote call kept failing after every retry."""

    def __init__(self, message: str, attempts: int):
        super().__init__(f"{message} (after {attempts} attempts)")
        self.attempts = attempts


class MockMissError(KsLlmError):
    """A scripted mock client received a prompt that no script entry matches."""


class DatasetError(KsLlmError):
    """A dataset file could not be loaded."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
