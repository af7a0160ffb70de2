"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration, shape mismatch or out-of-range parameter."""


class FormatError(ValueError):
    """A file does not follow the expected binary or text layout."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class ChecksumError(FormatError):
    """Stored CRC32 does not match the payload."""


class NumericalError(ArithmeticError):
    """A loss or prediction became non-finite."""


class DatasetError(RuntimeError):
    """The dataset cannot supply usable training samples."""
