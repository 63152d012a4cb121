"""Exception hierarchy shared by every module."""


class FkdError(Exception):
    """Base class for all errors raised by fkdsim."""


class ShapeError(FkdError):
    pass


class DomainError(FkdError, ValueError):
    pass


class NumericError(FkdError, ArithmeticError):
    pass


class FormatError(FkdError):
    pass


class IoError(FkdError, OSError):
    pass


class ConfigError(FkdError):
    pass


class SchemaError(FkdError):
    pass


class MissingRoundError(FkdError, KeyError):
    pass
