class DivergenceError(RuntimeError):
    """A numerical iterate or loss left the finite range."""

    def __init__(self, message: str, step: int | None = None, diagnostics: dict | None = None):
        super().__init__(message)
        self.step = step
        self.diagnostics = diagnostics or {}


class ProtocolViolation(RuntimeError):
    """The async chunking contract was broken (e.g. an under-committed prefix)."""


class BackpressureError(RuntimeError):
    """A producer write would overrun unread buffer slots."""


class SessionAborted(RuntimeError):
    def __init__(self, message: str, log=None, diagnostics: dict | None = None):
        super().__init__(message)
        self.log = log
        self.diagnostics = diagnostics or {}
