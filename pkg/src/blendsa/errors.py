"""Exception hierarchy shared across the package."""


class BlendsaError(Exception):
    """Base class for all package errors."""


class ParseError(BlendsaError):
    """Malformed input file or schema violation."""

    def __init__(self, message, row=None, column=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.row = row
        self.column = column


class FormulaError(BlendsaError):
    pass


class MissingValueError(BlendsaError):
    """A required cell is masked (unobserved and not imputed)."""

    def __init__(self, column, subject):
        super().__init__(f"missing value in column {column!r} for subject {subject}")
        self.column = column
        self.subject = subject


class NumericalError(BlendsaError):
    """Base class for fitting and solver failures."""


class SingularDesignError(NumericalError):
    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class SeparationError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    def __init__(self, message, last_iterate=None, residual=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.residual = residual


class InfiniteWeightError(NumericalError):
    pass


class EngineError(NumericalError):
    """A fit or solve failed inside the blended analysis; carries (imputation, mechanism)."""

    def __init__(self, message, imputation=None, mechanism=None, cause=None):
        super().__init__(f"imputation {imputation}, mechanism {mechanism!r}: {message}")
        self.imputation = imputation
        self.mechanism = mechanism
        self.cause = cause


class BootstrapError(NumericalError):
    pass


class SpecError(BlendsaError):
    """Invalid modularization spec or run configuration."""
