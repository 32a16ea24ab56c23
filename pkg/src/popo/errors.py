"""Exception types shared across the package."""


class PopoError(Exception):
    """Base class for package-specific failures."""


class ShapeError(PopoError, ValueError):
    """Array dimensions do not match what an operation requires."""


class NonFiniteError(PopoError, FloatingPointError):
    """A NaN or infinity appeared where training cannot continue."""


class FormatError(PopoError, ValueError):
    """A binary container violates the documented file layout."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class TruncatedFileError(FormatError):
    """File is shorter than its header claims."""


class SchemaError(FormatError):
    """Container header is valid JSON but misses or mistypes required fields."""


class CoverageError(PopoError, ValueError):
    """A policy needs (state, action) pairs the dataset never visited."""

    def __init__(self, pairs):
        self.pairs = list(pairs)
        super().__init__(
            "dataset has no samples for required (state, action) pairs: "
            + ", ".join(f"({s},{a})" for s, a in self.pairs)
        )
