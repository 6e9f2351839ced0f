class MixoptError(Exception):
    """Base class for errors raised by mixopt."""


class DataValidationError(MixoptError, ValueError):
    """Input data or configuration violates a contract."""


class HashMismatchError(DataValidationError):
    """Artifacts produced under different preprocessing settings were combined."""


class NumericalError(MixoptError, FloatingPointError):
    """A loss, gradient or parameter became non-finite."""
