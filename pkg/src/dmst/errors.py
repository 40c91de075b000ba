"""Exception taxonomy shared across the package."""


class DmstError(Exception):
    """Base class for all package-specific failures."""


class InvalidInput(DmstError):
    """An argument violates a documented precondition (shape, range, finiteness)."""


class NotPSD(DmstError):
    """A matrix required to be positive semi-definite has a negative eigenvalue."""


class NumericalFault(DmstError):
    """A computation produced non-finite values or otherwise lost numerical validity."""


class FormatError(DmstError):
    """A serialized artifact (checkpoint, config, image) is malformed."""
