"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A call violated an operation's precondition."""


class ConfigError(ValueError):
    """A run configuration violates one of its invariants."""


class SchemaError(ValueError):
    """An event log row does not match the declared schema."""


class TrainingError(RuntimeError):
    """Training hit a non-finite value."""


class LookupFailure(KeyError):
    """A requested user or entry does not exist."""
