class ValidationError(ValueError):
    """Invalid user input: bad shapes, non-finite values, out-of-range parameters."""


class FormatError(ValidationError):
    """A tensor file does not follow the STZ layout."""


class TensorIOError(OSError):
    """Truncated or unreadable tensor file."""


class InvariantError(RuntimeError):
    """An internal invariant of the attention engine was violated."""
