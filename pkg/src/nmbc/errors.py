"""Exception hierarchy. The CLI maps these onto exit codes."""


class NmbcError(Exception):
    exit_code = 1


class DataError(NmbcError, ValueError):
    """Malformed or inconsistent input data (model files, traces, datasets)."""

    exit_code = 2


class NumericalError(NmbcError, ArithmeticError):
    exit_code = 3


class ConvergenceError(NumericalError):
    """A root solve or optimizer failed to converge."""

    def __init__(self, message, residual=None, index=None):
        super().__init__(message)
        self.residual = residual
        self.index = index


class DivergenceError(NumericalError):
    """A closed-loop simulation blew up."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time
