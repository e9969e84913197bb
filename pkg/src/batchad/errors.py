"""Exception types shared across the package."""


class SchemaError(ValueError):
    """Manifest or config file does not match the documented schema."""


class DataError(ValueError):
    """Array file content is inconsistent with its header or non-finite."""


class ConfigError(ValueError):
    """One or more configuration values are out of range."""


class CollectionExhausted(Exception):
    """Every token of a target collection is excluded; caller skips it."""
