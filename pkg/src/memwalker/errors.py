"""Exception hierarchy shared across the package."""


class MemWalkerError(Exception):
    """Base class for every error raised by memwalker."""


class InvalidInput(MemWalkerError, ValueError):
    """A caller passed an argument that violates an operation's precondition."""


class ConfigError(InvalidInput):
    pass


class ParseError(MemWalkerError):
    """An LLM response could not be decoded into a legal action."""


class BudgetError(MemWalkerError):
    """A prompt would not fit the context window. Always a caller bug."""


class EndpointError(MemWalkerError):
    """The completion or embedding endpoint failed after retries."""


class ScriptMismatch(AssertionError):
    """A scripted backend received a prompt its script did not expect."""


class ScriptExhausted(AssertionError):
    pass


class CacheMismatch(MemWalkerError):
    """A cached tree does not belong to the document it was loaded for."""


class MalformedRecord(MemWalkerError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason
