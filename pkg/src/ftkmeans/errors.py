"""Exception types used across the package."""


class FormatError(ValueError):
    """Malformed matrix file. Carries the 1-based (row, col) of the offending cell."""

    def __init__(self, message, row=None, col=None):
        super().__init__(message)
        self.row = row
        self.col = col


class FaultEscalationError(RuntimeError):
    """A redundancy check kept failing after retry, violating the single-upset model."""
