"""Exception hierarchy shared by every module."""


class TpconvError(Exception):
    """Base class for all library errors."""


class ShapeError(TpconvError, ValueError):
    pass


class NumericsError(TpconvError, ArithmeticError):
    pass


class ConfigError(TpconvError, ValueError):
    pass


class UsageError(TpconvError, RuntimeError):
    pass


class ParseError(TpconvError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(TpconvError, ValueError):
    def __init__(self, message, record_id=None):
        if record_id is not None:
            message = f"record {record_id!r}: {message}"
        super().__init__(message)
        self.record_id = record_id
