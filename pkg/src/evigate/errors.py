"""Exception types shared across the package."""


class EvigateError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(EvigateError):
    """Operands have incompatible shapes."""


class DomainError(EvigateError):
    """Input lies outside a function's mathematical domain."""


class StateError(EvigateError):
    """Object used in an invalid lifecycle state (e.g. double backward)."""


class ConfigError(EvigateError):
    """Invalid or inconsistent configuration."""


class EmptyInputError(EvigateError):
    """An operation received an empty collection where data is required."""
