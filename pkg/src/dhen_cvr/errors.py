class ConfigError(ValueError):
    """A configuration value is missing, unknown or out of range.

    ``path`` is the dotted location of the offending field, when known.
    """

    def __init__(self, message: str, path: str | None = None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class DataError(ValueError):
    """Input data violates the schema or a data invariant."""


class DivergenceError(FloatingPointError):
    """Training produced a non-finite or exploding loss."""

    def __init__(self, message: str, last_good_step: int):
        self.last_good_step = last_good_step
        super().__init__(message)
