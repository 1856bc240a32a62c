"""Shared exception types."""


class ContractViolation(ValueError):
    """An operation was called with arguments that break its preconditions."""


class ConfigurationError(RuntimeError):
    """A config file, manifest, checkpoint or layout is invalid or inconsistent."""


class UsageError(Exception):
    """Bad command-line invocation."""
