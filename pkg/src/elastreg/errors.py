"""Exception hierarchy shared by all modules."""


class ElastRegError(Exception):
    """Base class for every error raised by elastreg."""


class InvalidParameterError(ElastRegError, ValueError):
    """A parameter violates its documented range."""


class GridMismatchError(ElastRegError, ValueError):
    """Two volumes/fields that must share a grid do not."""


class NumericalError(ElastRegError, ArithmeticError):
    """The computation produced non-finite values or degenerate input."""


class NoInformationError(NumericalError):
    """An image carries no usable intensity variation."""


class PairingError(ElastRegError, ValueError):
    """Fiducial sets cannot be paired by id."""


class PhantomGenerationError(ElastRegError, RuntimeError):
    """Phantom construction failed (e.g. fiducial placement)."""


class FormatError(ElastRegError, OSError):
    """A file does not follow the expected on-disk format."""
