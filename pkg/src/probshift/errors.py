"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericDomainError(FloatingPointError):
    """An operation produced a non-finite value from finite inputs."""


class ContractError(RuntimeError):
    """A documented precondition was violated by the caller."""


class BudgetExceededError(ContractError):
    """Exact enumeration would exceed its budget; use Monte-Carlo instead."""


class CheckpointError(Exception):
    """A checkpoint or weight snapshot cannot be loaded."""


class ChecksumError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ConfigError(ValueError):
    """Configuration failed validation."""


class ParseError(ValueError):
    """Input data could not be parsed."""
