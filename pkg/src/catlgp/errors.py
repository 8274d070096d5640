"""Exception hierarchy shared by every catlgp module."""


class CatLGPError(Exception):
    """Base class for all errors raised by catlgp."""


class InputError(CatLGPError, ValueError):
    """Bad user input. The CLI maps these to exit code 2."""


class NumericalError(CatLGPError, ArithmeticError):
    """Numerical failure. The CLI maps these to exit code 3."""


class DimensionMismatch(InputError):
    pass


class EmptyVector(InputError):
    pass


class IndexOutOfRange(InputError, IndexError):
    pass


class NonPositiveVariance(InputError):
    pass


class InsufficientData(InputError):
    pass


class DimensionOutOfRange(InputError, IndexError):
    pass


class MalformedCsv(InputError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SingletonVariable(InputError):
    def __init__(self, name):
        super().__init__(f"variable {name!r} has fewer than 2 distinct categories")
        self.name = name


class EmptyFile(InputError):
    pass


class TooManyLabels(InputError):
    pass


class InvalidFlag(InputError):
    pass


class ModelFormatError(InputError):
    pass


class IoFailure(CatLGPError, OSError):
    pass


class NotPositiveDefinite(NumericalError):
    pass


class DivergenceDetected(NumericalError):
    pass
