"""Exception hierarchy shared by every module in the package."""


class SaptError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SaptError, ValueError):
    pass


class ParameterError(SaptError, ValueError):
    pass


class InputError(SaptError, ValueError):
    pass


class DomainError(SaptError, ValueError):
    pass


class NumericError(SaptError, ArithmeticError):
    pass


class UsageError(SaptError, RuntimeError):
    pass


class ContractError(SaptError, RuntimeError):
    """An invariant of the continual-learning protocol would be violated."""


class StateError(SaptError, RuntimeError):
    pass


class ConfigError(SaptError, ValueError):
    def __init__(self, message: str, field: str | None = None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class LengthError(SaptError, ValueError):
    pass


class ParseError(SaptError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line
