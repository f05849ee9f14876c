"""Exception types carrying machine-readable codes for the CLI."""


class SolverError(Exception):
    """Base class; ``code`` is a stable identifier and ``exit_status`` the CLI status."""

    exit_status = 1

    def __init__(self, message: str, code: str = "ERROR"):
        super().__init__(message)
        self.code = code


class ValidationError(SolverError, ValueError):
    exit_status = 2

    def __init__(self, message: str, code: str = "VALIDATION"):
        super().__init__(message, code)


class GuardError(SolverError, RuntimeError):
    """An enumeration or tilt guard refused to run."""

    exit_status = 3

    def __init__(self, message: str, code: str = "GUARD"):
        super().__init__(message, code)


class NumericalError(SolverError, ArithmeticError):
    exit_status = 4

    def __init__(self, message: str, code: str = "NUMERICAL"):
        super().__init__(message, code)
