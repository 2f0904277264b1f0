"""Exception types shared across the package."""


class TeamformError(Exception):
    pass


class ContractError(TeamformError, ValueError):
    """A documented precondition was violated by the caller."""


class DimensionError(TeamformError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(TeamformError, ValueError):
    pass


class SizeLimitError(TeamformError, ValueError):
    """Instance is too large for an exhaustive routine."""
