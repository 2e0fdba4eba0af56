"""Exception hierarchy shared across the package."""


class StreamTomError(Exception):
    """Base class for every error raised by streamtom."""


class ValidationError(StreamTomError, ValueError):
    """Input data violates a documented invariant."""


class ShapeMismatch(ValidationError):
    pass


class NonFiniteValue(ValidationError):
    pass


class SaliencyOutOfRange(ValidationError):
    pass


class BudgetExceedsSet(ValidationError):
    pass


class EmptyStaticSet(ValidationError):
    pass


class CorruptPackedLength(ValidationError):
    pass


class EmptyStore(StreamTomError, LookupError):
    pass


class IndexOutOfRange(StreamTomError, IndexError):
    pass


class FormatError(StreamTomError, ValueError):
    """A binary file (TOKS stream or OQM1 snapshot) is malformed."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
