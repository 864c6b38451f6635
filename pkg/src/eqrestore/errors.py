"""Exception types raised across the package.

Each class maps to one CLI exit code (see ``eqrestore.cli``).
"""


class EqRestoreError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(EqRestoreError, ValueError):
    """A parameter is outside its documented domain."""


class DegenerateOperatorError(InvalidArgumentError):
    """An operator observes nothing (e.g. an all-zero mask)."""


class CompositeNotPseudoInvertibleError(EqRestoreError):
    """The hand-built pseudo-inverse of a composite fails the Moore-Penrose checks."""

    def __init__(self, residual, message=None):
        self.residual = float(residual)
        super().__init__(message or f"composite pseudo-inverse violates Moore-Penrose identities "
                                    f"(residual {self.residual:.3e})")


class NumericDomainError(EqRestoreError, ValueError):
    """Non-finite input handed to a numerical routine."""


class NumericDivergenceError(EqRestoreError):
    """A solver produced a non-finite iterate."""

    def __init__(self, iteration, message=None):
        self.iteration = int(iteration)
        super().__init__(message or f"non-finite state at iteration {self.iteration}")


class StaleStateError(EqRestoreError):
    """A gradient was requested at a state that is not a fixed point."""


class SingularJacobianError(EqRestoreError):
    """The residual Jacobian is numerically singular."""

    def __init__(self, smallest_singular_value):
        self.smallest_singular_value = float(smallest_singular_value)
        super().__init__(f"residual Jacobian near-singular (sigma_min ~ {self.smallest_singular_value:.3e})")


class FormatError(EqRestoreError):
    """Malformed file contents."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class ModelFormatError(FormatError):
    """MLP manifest and weight blob disagree."""
