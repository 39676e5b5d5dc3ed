"""Exception hierarchy shared by every module."""


class FedConfError(Exception):
    """Base class for all errors raised by fedconf."""


class ShapeError(FedConfError, ValueError):
    pass


class ConfigError(FedConfError, ValueError):
    pass


class DomainError(FedConfError, ValueError):
    pass


class NumericError(FedConfError, ArithmeticError):
    pass


class ParseError(FedConfError, ValueError):
    """Malformed record in a text file. Carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatError(FedConfError, ValueError):
    pass
