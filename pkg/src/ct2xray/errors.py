"""Shared exception types."""


class ContractViolation(ValueError):
    """An operation was called with inputs that break its contract."""


class ConfigError(ValueError):
    """A configuration value is invalid, unknown, or inconsistent."""


class FormatError(ValueError):
    """A file on disk does not match its declared format."""


class TrainingAbort(RuntimeError):
    """Training hit a non-recoverable state (e.g. non-finite loss)."""
