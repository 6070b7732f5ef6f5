"""Exception types shared across the package.

The CLI maps these onto exit codes: InputError -> 2,
DegenerateInputError -> 3, NumericalError -> 4.
"""


class DPRiskError(Exception):
    """Base class for all package errors."""


class InputError(DPRiskError, ValueError):
    """Malformed or inconsistent user input (bad labels, bad shapes, bad config)."""


class DegenerateInputError(DPRiskError, ValueError):
    """Structurally valid input on which the requested quantity is undefined,
    e.g. a table without sample uniques passed to a uniques-only criterion."""


class NumericalError(DPRiskError, RuntimeError):
    """Numeric failure: divergence, overflow, non-positive-definite metric,
    non-finite sampler state."""
