"""Exception types shared across the package."""


class BurnSegError(Exception):
    pass


class ShapeError(BurnSegError, ValueError):
    pass


class ContractError(BurnSegError, ValueError):
    pass


class EmptyTapeError(ContractError):
    pass


class NumericError(BurnSegError, FloatingPointError):
    """NaN/Inf reached a forward result or the loss."""


class ConfigError(BurnSegError, ValueError):
    pass


class DataError(BurnSegError):
    """Unreadable or inconsistent input data (maps to CLI exit code 2)."""


class LoadError(DataError):
    pass


class TilingError(DataError):
    pass


class CheckpointFormatError(DataError):
    pass
