"""Exception hierarchy shared by every moeforge module."""


class MoeForgeError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(MoeForgeError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(MoeForgeError):
    """A configuration value or combination of values is invalid."""


class ContractError(MoeForgeError):
    """A caller violated an operation's precondition."""


class InsufficientDataError(ContractError):
    """The provided dataset is too small for the requested construction."""


class FormatError(MoeForgeError):
    """A serialized artifact is malformed."""


class NumericError(MoeForgeError):
    """A numeric invariant (finiteness, convergence) was violated."""
