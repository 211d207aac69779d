"""Exception hierarchy shared by all modules.

Validation problems (bad shapes, malformed files, bad parameters) derive from
``ValidationError``; numerical failures (non-convergence, singular systems,
indefinite inputs) derive from ``NumericError``. The CLI maps these onto its
exit codes.
"""


class ValidationError(ValueError):
    """Input failed a precondition check."""


class DimensionError(ValidationError):
    """Array shapes do not agree."""


class ParseError(ValidationError):
    """A panel or table file could not be parsed."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = []
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class InsufficientHistoryError(ValidationError):
    """Not enough observations for the requested computation."""


class AlignmentError(ValidationError):
    """Forecast and realized dates do not line up."""

    def __init__(self, message, dates=()):
        self.dates = [str(d) for d in dates]
        if self.dates:
            shown = ", ".join(self.dates[:10])
            more = f" and {len(self.dates) - 10} more" if len(self.dates) > 10 else ""
            message = f"{message}: {shown}{more}"
        super().__init__(message)


class ConfigError(ValidationError):
    """Invalid model, synthetic-data or run configuration."""


class NumericError(ArithmeticError):
    """A numerical routine failed (non-convergence, singular system)."""


class DomainError(NumericError):
    """Input lies outside the mathematical domain of the routine."""


class InfeasibleError(NumericError):
    """Constraint set admits no solution."""
