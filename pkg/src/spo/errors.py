"""Exception hierarchy. The CLI maps these onto exit codes."""


class SPOError(Exception):
    pass


class ParameterError(SPOError, ValueError):
    """Invalid argument or configuration."""


class DomainError(SPOError, ValueError):
    """Argument outside the domain of a utility or its conjugate."""


class DataError(SPOError, ValueError):
    """Market data that cannot be turned into a valid model input."""


class SchemaError(DataError):
    """Malformed or inconsistent tabular input."""


class NumericalError(SPOError, ArithmeticError):
    def __init__(self, message, iteration=None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration
