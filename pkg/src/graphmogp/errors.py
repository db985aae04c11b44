"""Exception hierarchy shared by every module of the package."""


class GraphMogpError(Exception):
    """Base class for all errors raised by graphmogp."""


class InputError(GraphMogpError, ValueError):
    """Malformed user input (files, specs, shapes). Maps to CLI exit code 2."""


class NumericalError(GraphMogpError, ArithmeticError):
    """A numerical procedure failed. Maps to CLI exit code 3."""


class DimensionMismatch(InputError):
    pass


class ParseError(InputError):
    pass


class InfeasibleDegree(InputError):
    pass


class NotPositiveDefinite(NumericalError):
    pass


class ConvergenceFailure(NumericalError):
    pass


class SingularForNegativePower(NumericalError):
    pass


class SingularMatrix(NumericalError):
    pass


class GenerationFailure(NumericalError):
    pass


class NonpositivePEntry(NumericalError):
    pass


class StaleCache(GraphMogpError, RuntimeError):
    pass


class AllRestartsFailed(NumericalError):
    pass
