"""Exception hierarchy shared by every stage."""


class XmodalError(Exception):
    """Base class for all framework errors."""


class ShapeError(XmodalError, ValueError):
    pass


class DomainError(XmodalError, ValueError):
    pass


class DegenerateInputError(XmodalError, ValueError):
    pass


class NumericError(XmodalError, ArithmeticError):
    pass


class UsageError(XmodalError, RuntimeError):
    pass


class TokenIndexError(XmodalError, IndexError):
    pass


class FormatError(XmodalError, ValueError):
    pass


class ConfigError(XmodalError, ValueError):
    """Bad configuration text or an inconsistent module selection.

    ``line``/``column`` are 1-based and only set for syntax errors.
    """

    def __init__(self, message, line=None, column=None):
        if line is not None:
            message = f"line {line}, column {column or 1}: {message}"
        super().__init__(message)
        self.line = line
        self.column = column


class DuplicateRegistrationError(ConfigError):
    pass
