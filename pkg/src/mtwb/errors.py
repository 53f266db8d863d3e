"""Exception types shared across the workbench."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A computation produced or received a non-finite or degenerate value."""


class TapeError(RuntimeError):
    """Misuse of a gradient tape (reuse, foreign loss, non-scalar loss)."""


class ConfigError(ValueError):
    """Invalid configuration value.

    ``field`` carries the dotted path of the offending entry when known.
    """

    def __init__(self, message, field=None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)
