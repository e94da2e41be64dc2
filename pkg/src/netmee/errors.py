"""Exception hierarchy shared across the package.

Every error carries a short machine-readable ``code`` and the process exit
status the CLI maps it to (0 ok, 2 validation, 3 convergence, 4 I/O).
"""

from __future__ import annotations


class NetmeeError(Exception):
    """Base class for all package errors."""

    code = "error"
    exit_code = 1


class ValidationError(NetmeeError):
    """Bad inputs: malformed files, violated preconditions, invalid config."""

    code = "validation"
    exit_code = 2


class ConvergenceError(NetmeeError):
    """An iterative solver failed to converge within its budget."""

    code = "convergence"
    exit_code = 3

    def __init__(self, message: str, *, residual: float | None = None,
                 objective: float | None = None):
        super().__init__(message)
        self.residual = residual
        self.objective = objective


class RankDeficiencyError(NetmeeError):
    """A moment Jacobian or weighted cross-product is numerically singular."""

    code = "rank_deficient"
    exit_code = 3


class AbsentCellError(ValidationError):
    """A requested exposure label was not estimated (too few observations)."""

    code = "absent_cell"
