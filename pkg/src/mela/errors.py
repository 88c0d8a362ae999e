"""Exception types shared across the package."""


class ContractError(ValueError):
    """A precondition on shapes, dimensions or arguments was violated."""


class NumericError(ArithmeticError):
    """An operation produced a non-finite value."""


class CheckpointError(RuntimeError):
    """A checkpoint could not be loaded or did not match the expected layout."""


class ConfigError(ValueError):
    """Invalid or unknown configuration key/value."""
