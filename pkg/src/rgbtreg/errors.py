"""Exception types shared across the package."""


class RegistrationError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(RegistrationError):
    """An argument violated a documented shape, dtype or range contract."""


class NumericError(RegistrationError):
    """A computation produced non-finite values."""


class ConfigError(RegistrationError):
    """A run configuration is malformed or inconsistent."""


class SchemaError(RegistrationError):
    """A file on disk does not match its expected binary or JSON schema."""


class DataError(RegistrationError):
    """Input data is missing, unreadable or inconsistent with its manifest."""
