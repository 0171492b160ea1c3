"""Exception types that map onto CLI exit codes."""


class UsageError(Exception):
    """Bad invocation: unknown flags, missing arguments, malformed config keys."""


class DataError(Exception):
    """Malformed or inconsistent input data."""


class NumericError(Exception):
    """Non-finite losses or gradients, or other numeric breakdown."""
