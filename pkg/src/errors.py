class CalidropError(Exception):
    """Base class of every error raised on purpose by calidrop."""

    exit_code = 1


class ConfigurationError(CalidropError, ValueError):
    """Invalid configuration: shapes, rates, unknown keys, oversized requests."""

    exit_code = 2


class UsageError(CalidropError, RuntimeError):
    """An operation was called in a state that cannot serve it."""

    exit_code = 2


class UnsupportedOperationError(CalidropError, NotImplementedError):
    exit_code = 2


class DataFormatError(CalidropError, ValueError):
    """Input files are missing, truncated or malformed."""

    exit_code = 3


class NumericalError(CalidropError, ArithmeticError):
    """Non-finite loss or gradient."""

    exit_code = 4
