"""
Domain errors shared by the simulation and optimization services.

Each error carries the CLI exit code and the HTTP status used by the
controller layer.
"""

from typing import Optional, Sequence


class IgaError(Exception):
    """Base class for every failure raised by the services."""

    exit_code: int = 1
    status_code: int = 500

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class ContractError(IgaError, ValueError):
    """A precondition of an operation was violated by the caller."""

    exit_code = 1
    status_code = 400


class ParseError(IgaError):
    exit_code = 2
    status_code = 422


class ConfigurationError(IgaError):
    exit_code = 2
    status_code = 422


class TopologyError(IgaError):
    exit_code = 3
    status_code = 422


class ConformityError(TopologyError):
    pass


class GeometryError(IgaError):
    exit_code = 4
    status_code = 422


class SplineDomainError(GeometryError, ValueError):
    """Parameter outside the knot range."""


class SolverError(IgaError):
    exit_code = 5
    status_code = 500


class FactorizationError(SolverError):
    pass


class PartitionError(SolverError):
    pass


class IetiSetupError(SolverError):
    pass


class SmoothingError(SolverError):
    pass


class ConvergenceError(SolverError):
    def __init__(self, message: str, residuals: Optional[Sequence[float]] = None):
        super().__init__(message)
        self.residuals = list(residuals or [])


class FeasibilityError(IgaError):
    exit_code = 6
    status_code = 409


class LineSearchError(FeasibilityError):
    def __init__(self, message: str, trials: Optional[Sequence[dict]] = None):
        super().__init__(message)
        self.trials = list(trials or [])


class OptimizationFailed(IgaError):
    """Wraps the error that stopped an optimization run together with its partial result."""

    def __init__(self, cause: IgaError, result):
        super().__init__(cause.message)
        self.cause = cause
        self.result = result
        self.exit_code = cause.exit_code
        self.status_code = cause.status_code
