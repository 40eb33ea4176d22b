"""Exception types shared across modules."""


class SslError(Exception):
    """Base class for package errors."""


class DataError(SslError):
    """Input data is malformed, inconsistent or missing."""


class DimensionError(SslError, ValueError):
    pass


class NonFiniteError(SslError, FloatingPointError):
    pass


class StoreFormatError(DataError):
    """Binary file has a bad magic, version, or is truncated."""


class NotFoundError(DataError, KeyError):
    def __str__(self):
        # KeyError would repr() the message
        return str(self.args[0]) if self.args else ""
