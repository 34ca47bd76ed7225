"""Exception hierarchy shared by every module and mapped to CLI exit codes."""


class RosaError(Exception):
    """Base class for all package errors."""

    exit_code = 3


class InputError(RosaError, ValueError):
    """Rejected input: bad shapes, out-of-range parameters, malformed data."""

    exit_code = 2


class ParseError(InputError):
    """Weight or token file could not be parsed."""

    def __init__(self, message, position=None):
        if position is not None:
            message = f"{message} (at byte {position})"
        super().__init__(message)
        self.position = position


class SchemaError(InputError):
    """Weight file parsed but its tensors do not match the expected model layout."""


class InfeasibleCoefficientsError(InputError):
    """Sparsity coefficients violate positivity after solving the constraints."""


class ConvergenceError(RosaError, ArithmeticError):
    """Iterative numeric routine hit its iteration cap."""

    exit_code = 3

    def __init__(self, message, residual=None):
        if residual is not None:
            message = f"{message} (residual {residual:.3e})"
        super().__init__(message)
        self.residual = residual
