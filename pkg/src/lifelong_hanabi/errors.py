"""Exception types shared across the package."""


class UsageError(ValueError):
    """A caller violated an operation's precondition."""


class ConfigError(UsageError):
    """An invalid game, agent or experiment configuration."""


class NumericError(ArithmeticError):
    """Non-finite values reached a numerical routine."""
