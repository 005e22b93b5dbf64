"""Exception types shared across the toolkit."""


class DimensionError(ValueError):
    """Array shapes or extents are incompatible with an operation."""


class ParameterError(ValueError):
    """A configuration value or argument is outside its allowed range."""


class FormatError(ValueError):
    """A binary or text file does not match its declared layout."""


class NumericalError(ArithmeticError):
    """A computation produced or encountered non-finite values."""


class PlacementError(ValueError):
    """A shape lies fully outside the canvas it should be drawn on."""


class ValidationError(ValueError):
    """A constructed instance violates its declared invariants."""
