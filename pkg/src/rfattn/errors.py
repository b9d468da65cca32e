"""Exception types raised across the package."""


class RFAttnError(Exception):
    """Base class for all package errors."""


class ValidationError(RFAttnError, ValueError):
    """A configuration or spec field is out of range."""


class DomainError(RFAttnError, ValueError):
    """An argument lies outside the mathematical domain of a function."""


class EmptyRequestError(DomainError):
    """A sampler was asked for zero values."""


class ShapeError(RFAttnError, ValueError):
    """Array shapes are incompatible with the operation."""


class CapacityError(RFAttnError, ValueError):
    """A request exceeds a fixed internal table."""


class ContractError(RFAttnError, ValueError):
    """Caller violated a documented precondition."""


class UnsupportedParametersError(RFAttnError, ValueError):
    """Parameters would require the complex-valued branch, which is not implemented."""


class NumericalFailure(RFAttnError, ArithmeticError):
    """NaN or inf appeared where a finite value was required.

    ``row`` names the offending input row when one is known.
    """

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class DegenerateRowError(RFAttnError, ArithmeticError):
    """An attention row has a zero or negative normalizer."""

    def __init__(self, rows):
        rows = [int(r) for r in rows]
        shown = ", ".join(map(str, rows[:10]))
        more = "" if len(rows) <= 10 else f" (+{len(rows) - 10} more)"
        super().__init__(f"non-positive attention normalizer in row(s) {shown}{more}")
        self.rows = rows
