"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array or sequence has the wrong length or shape."""


class DomainError(ValueError):
    """Input values fall outside the operation's domain (negative, non-finite, zero rows)."""


class FormatError(ValueError):
    """A file could not be parsed; ``offset`` is the byte offset (or line number) at fault."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, iteration=None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration
