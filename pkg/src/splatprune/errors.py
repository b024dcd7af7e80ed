"""Exception types raised across the package."""


class SplatPruneError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(SplatPruneError, ValueError):
    pass


class ShapeError(SplatPruneError, ValueError):
    pass


class ScoringError(SplatPruneError, ArithmeticError):
    pass


class PreconditionError(SplatPruneError, ValueError):
    pass


class PlyParseError(SplatPruneError, ValueError):
    def __init__(self, message: str, prop: str | None = None, element: int | None = None):
        super().__init__(message)
        self.prop = prop
        self.element = element


class ConfigError(SplatPruneError, ValueError):
    pass
