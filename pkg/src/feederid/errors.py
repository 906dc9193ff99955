"""Exception hierarchy.

Two families: :class:`DataError` for malformed inputs (files, shapes,
phase bookkeeping) and :class:`NumericalError` for failures of the numerics
themselves.  The CLI maps them to exit codes 2 and 3.
"""


class FeederIdError(Exception):
    pass


class DataError(FeederIdError, ValueError):
    pass


class NumericalError(FeederIdError, ArithmeticError):
    pass


class SchemaError(DataError):
    """Feeder or measurement document does not match the expected schema."""

    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class PhaseConsistencyError(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class OutputExistsError(DataError, FileExistsError):
    pass


class SingularImpedance(NumericalError):
    pass


class NonConvergence(NumericalError):
    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class Divergence(NumericalError):
    pass


class DegenerateSamples(NumericalError):
    pass


class SingularCovariance(DegenerateSamples):
    pass


class LogBranchError(NumericalError):
    pass


class NonPositiveTau(NumericalError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class IllConditionedL(NumericalError):
    pass


class MaxIterationsExceeded(NumericalError):
    pass


class DivergingIterates(NumericalError):
    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class EmptyComparableSet(DataError):
    pass
