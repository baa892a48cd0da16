"""Exception hierarchy.

Every error carries an ``exit_code`` used by the command line front end:
2 for bad input, 3 for numerical failures.
"""


class MassiveError(Exception):
    exit_code = 3


class PreconditionError(MassiveError, ValueError):
    exit_code = 2


class ParseError(MassiveError, ValueError):
    exit_code = 2


class DegenerateInputError(MassiveError, ValueError):
    """Moments imply a singular instrument covariance or zero residual variance."""

    exit_code = 2


class InconsistentMomentsError(MassiveError, ValueError):
    """Moments that cannot come from any Gaussian model (non-PD conditional covariance)."""

    exit_code = 2


class DegenerateConstraintError(MassiveError):
    """A manifold initialization constraint has no finite solution."""


class HyperparameterError(MassiveError):
    pass


class NoInitializationError(MassiveError):
    pass


class OptimizationError(MassiveError):
    pass


class ApproximationError(MassiveError):
    pass
