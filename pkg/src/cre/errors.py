"""Exception types shared across the library."""


class CreError(Exception):
    """Base class for all library errors."""


class ShapeError(CreError, ValueError):
    """Operand shapes (or dtypes) are incompatible for an operation."""


class ContractError(CreError, ValueError):
    """A documented precondition of an operation was violated."""


class TapeReuseError(CreError, RuntimeError):
    """A gradient tape was replayed more than once."""


class DegenerateFeatureError(CreError, ValueError):
    """A feature vector had (near-)zero norm where a direction was required."""


class InsufficientDataError(CreError, ValueError):
    """Not enough samples to carry out a fit."""


class GeometryError(CreError, ValueError):
    """Image dimensions are incompatible with the patch grid."""


class FormatError(CreError, ValueError):
    """A binary or JSON artifact does not match its declared format."""


class ManifestError(CreError, ValueError):
    """A dataset manifest failed to parse or validate."""


class ImageDecodeError(CreError, ValueError):
    """An image file could not be decoded; recoverable per record."""
