"""Exception types raised across attikit."""


class AttikitError(Exception):
    """Base class for all library errors."""


class NotAntisymmetric(AttikitError, ValueError):
    pass


class NotProperRotation(AttikitError, ValueError):
    pass


class DegenerateVector(AttikitError, ValueError):
    pass


class DegenerateEigenvalues(AttikitError, ValueError):
    """M lacks the distinct-eigenvalue structure the equilibrium analysis needs."""


class GainNotPositiveDefinite(AttikitError, ValueError):
    pass


class CovarianceMissing(AttikitError, ValueError):
    pass


class CovarianceNotPD(AttikitError, ArithmeticError):
    """Covariance lost symmetry or positive definiteness during propagation."""


class NoConvergence(AttikitError, RuntimeError):
    pass


class NoCertificateFound(AttikitError, RuntimeError):
    pass


class DivergenceDetected(AttikitError, RuntimeError):
    pass


class ConfigError(AttikitError, ValueError):
    """Invalid run configuration; the message names the offending key."""
