"""Exception types that the CLI maps onto distinct exit codes."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class DataError(ValueError):
    """Dataset file or content failed validation."""
