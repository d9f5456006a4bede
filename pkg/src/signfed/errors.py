"""Exception types raised across the package."""


class ConfigError(ValueError):
    """Invalid configuration or inconsistent dimensions.

    ``field`` names the offending configuration key when there is one.
    """

    def __init__(self, message, field=None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)


class FormatError(ValueError):
    """A data file does not follow its binary format."""


class NumericError(ArithmeticError):
    """NaN input, failed integration or another numerical breakdown."""


class DomainError(ValueError):
    """Argument outside the domain where a bound or formula is valid."""


class SamplerError(RuntimeError):
    """Rejection sampler exceeded its proposal cap."""


class CalibrationError(RuntimeError):
    """No noise level in the search interval reaches the privacy target."""
