"""Exception types shared across the package."""


class RegmatchError(Exception):
    """Base class for all package-specific errors."""


class EmptyCorpusError(RegmatchError):
    """Raised when an operation requires a non-empty corpus or vocabulary."""


class NumericalError(RegmatchError):
    """Raised when a computation produces NaN/Inf or otherwise diverges."""


class ConvergenceError(NumericalError):
    """Iterative solver hit its iteration cap.

    Attributes:
        residual: Last observed residual, for diagnostics.
    """

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual
