"""Exception taxonomy shared by every module."""


class SdnetError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(SdnetError):
    """A model, layer or experiment was described with impossible geometry
    or inconsistent settings."""


class DataError(SdnetError):
    """An input file or dataset violates its format contract."""


class NumericError(SdnetError):
    """A computation received or produced non-finite values."""


class InternalError(SdnetError):
    """An internal contract was violated; indicates a bug, not bad input."""
