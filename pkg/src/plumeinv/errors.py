"""Exception hierarchy shared by all plumeinv modules."""


class PlumeInvError(Exception):
    """Base class for library errors."""


class ParseError(PlumeInvError, ValueError):
    """Malformed text input. Carries the 1-based row and column when known."""

    def __init__(self, message, row=None, column=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column}")
        if where:
            message = f"{', '.join(where)}: {message}"
        super().__init__(message)
        self.row = row
        self.column = column


class ValidationError(PlumeInvError, ValueError):
    """A value violates a documented invariant."""


class DomainError(PlumeInvError, ValueError):
    """Argument outside the mathematical or geometric domain of an operation."""


class InconsistencyError(PlumeInvError, ValueError):
    """Inputs that are individually valid but contradict each other."""


class SolverError(PlumeInvError, RuntimeError):
    """An iterative solver could not continue. ``last_iterate`` holds its final state."""

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate
