"""Exception types shared across the package."""


class ContractError(RuntimeError):
    """A documented precondition was violated by the caller."""


class ShapeError(ValueError):
    """Tensor shapes or widths do not agree."""


class ArgumentError(ValueError):
    """An argument is outside its documented domain."""


class NumericError(ArithmeticError):
    """A computation produced or met a non-finite or degenerate value."""


class FormatError(ValueError):
    """A binary or text artifact is malformed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
