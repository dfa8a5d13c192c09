"""Exception types shared across the package."""


class TriAlignError(Exception):
    """Base class for all errors raised by this package."""

    code = "error"


class ValidationError(TriAlignError):
    """An invariant on user-supplied data does not hold."""

    code = "validation"


class FormatError(TriAlignError):
    """A file is malformed, truncated, or of the wrong version."""

    code = "format"


class DimensionMismatch(ValidationError):
    """Vector or matrix dimensions disagree with the expected layout."""

    code = "dim_mismatch"


class TextlessShapeError(TriAlignError):
    """A shape has no text candidate in any category; the caller decides policy."""

    code = "textless_shape"


class DegenerateInputError(TriAlignError):
    """Numerically degenerate input: zero-norm vector, zero-area mesh, etc."""

    code = "degenerate"
