"""Exception types raised across the package."""


class VirmError(Exception):
    """Base class for every error raised by virm."""


class DimensionError(VirmError, ValueError):
    pass


class DegenerateBatchError(VirmError, ValueError):
    pass


class ContractError(VirmError, ValueError):
    pass


class IdxFormatError(VirmError, ValueError):
    pass


class IdxLengthError(IdxFormatError):
    pass


class IdxUnsupportedTypeError(IdxFormatError):
    pass


class DegenerateSupportError(VirmError, ValueError):
    pass


class ConfigError(VirmError, ValueError):
    pass


class LabelIndexError(VirmError, IndexError):
    pass
