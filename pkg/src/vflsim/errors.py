"""Exception types shared across the package."""


class VflsimError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(VflsimError):
    """An experiment configuration is malformed or inconsistent."""


class DataFormatError(VflsimError):
    """A data file does not match its declared format."""
