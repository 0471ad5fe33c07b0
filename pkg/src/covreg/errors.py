"""Exception types shared across the package."""


class CovRegError(Exception):
    """Base class for covreg errors."""


class NumericalError(CovRegError):
    """A linear-algebra operation failed beyond recoverable jitter."""


class DataFormatError(CovRegError):
    """Input data could not be parsed or violates the dataset contract."""


class CapacityError(CovRegError):
    """A computation was refused because it exceeds a configured size cap."""
