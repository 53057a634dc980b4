"""Shared error types that cut across modules."""


class ConfigError(ValueError):
    """An input file or CLI configuration failed schema validation."""
