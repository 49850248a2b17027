class CoaxMpiError(Exception):
    """Base class for every error raised by coaxmpi services."""


class DomainError(CoaxMpiError, ValueError):
    pass


class ZeroSignalError(DomainError):
    pass


class ConfigurationError(CoaxMpiError, ValueError):
    pass


class DatasetFormatError(CoaxMpiError, ValueError):
    def __init__(self, message: str, row: int = 0):
        self.row = row
        super().__init__(f"row {row}: {message}" if row else message)


class ModelFormatError(CoaxMpiError, ValueError):
    pass


class DegenerateError(CoaxMpiError, ArithmeticError):
    pass
