"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: usage errors -> 1, DataError -> 2,
NumericError -> 3.
"""


class ConfigError(Exception):
    """Invalid configuration: unknown kinds, bad dimensions, bad hyperparameters."""


class DataError(Exception):
    """File or manifest problem. `code` is a stable machine-readable tag."""

    def __init__(self, message, code="data"):
        super().__init__(message)
        self.code = code


class NumericError(Exception):
    """A computation produced a non-finite value where a finite one is required."""
