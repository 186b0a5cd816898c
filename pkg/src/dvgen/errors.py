"""Exception hierarchy shared across the package."""


class DvgenError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(DvgenError, ValueError):
    pass


class NotPositiveDefinite(DvgenError, ValueError):
    pass


class NonFiniteValue(DvgenError, ArithmeticError):
    def __init__(self, message, component=None):
        super().__init__(message)
        self.component = component


class EmptyFrame(DvgenError, ValueError):
    pass


class FrameTooSmall(DvgenError, ValueError):
    pass


class ConfigError(DvgenError, ValueError):
    pass


class CheckpointError(DvgenError, ValueError):
    pass


class DataError(DvgenError, OSError):
    pass
