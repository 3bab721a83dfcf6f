"""Exception types shared across the package."""


class CertitudeError(Exception):
    """Base class for all library errors."""


class DimensionError(CertitudeError):
    """Operand shapes do not compose."""


class ContractError(CertitudeError):
    """A documented precondition was violated."""


class NumericError(CertitudeError):
    """A NaN or Inf appeared where only finite values are allowed."""


class FormatError(CertitudeError):
    """A file could not be parsed; message carries position context."""


class ValidationError(CertitudeError):
    """Parsed data is structurally valid but semantically inconsistent."""


class CapacityError(CertitudeError):
    """Instance exceeds a documented size guard."""
