"""Exception types raised across the package."""


class DerivSplatError(Exception):
    """Base class for all package errors."""


class ZeroNormError(DerivSplatError, ValueError):
    pass


class NonPositiveScaleError(DerivSplatError, ValueError):
    pass


class NonUnitDirectionError(DerivSplatError, ValueError):
    pass


class WidthMismatchError(DerivSplatError, ValueError):
    pass


class CacheMismatchError(DerivSplatError, ValueError):
    pass


class BadDoppelgangerCountError(DerivSplatError, ValueError):
    pass


class DegenerateBoxError(DerivSplatError, ValueError):
    pass


class BadChannelRangeError(DerivSplatError, ValueError):
    pass


class ForwardMismatchError(DerivSplatError, ValueError):
    pass


class ShapeMismatchError(DerivSplatError, ValueError):
    pass


class ConfigError(DerivSplatError, ValueError):
    pass


class DatasetIOError(DerivSplatError, OSError):
    pass
