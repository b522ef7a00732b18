"""Exception types shared across modules.

All derive from ValueError or RuntimeError so generic handlers keep working.
"""


class MatrixFormatError(ValueError):
    """Matrix input is malformed (shape, sign, NaN, symmetry)."""


class CohortError(ValueError):
    """A cohort-level precondition failed (size, missing data, alignment)."""


class InstabilityError(ValueError):
    """The system matrix has spectral radius >= 1."""


class ConditioningError(ValueError):
    """An eigenvalue lies too close to +-1 for a finite controllability value."""


class ConvergenceError(RuntimeError):
    """An iterative routine exhausted its iteration cap."""


class DegenerateDataError(ValueError):
    """Data lacks the variation an analysis needs (constant column, rank deficiency)."""
