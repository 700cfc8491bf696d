"""Exception hierarchy shared across the package."""


class SafePDPError(Exception):
    """Base class for all package errors."""


class ConfigError(SafePDPError):
    pass


class NonFiniteError(SafePDPError, FloatingPointError):
    """A NaN or Inf appeared while evaluating a user function."""


class SolverError(SafePDPError):
    """Base class for forward/backward solver failures."""


class InfeasibleStart(SolverError):
    pass


class NonPositiveCurvature(SolverError):
    pass


class MaxItersExceeded(SolverError):
    pass


class SingularLuu(SolverError):
    pass


class InconsistentEqualities(SolverError):
    pass


class InitNotSafe(SolverError):
    pass


class SafetyError(SafePDPError):
    """Base class for outer-level safety violations."""


class UnsafeInitialization(SafetyError):
    pass


class SafetyBreach(SafetyError):
    pass


class DomainError(SafetyError, ValueError):
    """A barrier term was asked to evaluate ln of a non-positive argument."""
