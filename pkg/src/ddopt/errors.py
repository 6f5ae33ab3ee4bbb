"""Exception hierarchy shared by every module."""


class DDOptError(Exception):
    """Base class for all library errors."""


class SizeError(DDOptError, ValueError):
    pass


class DegenerateStateError(DDOptError, ArithmeticError):
    """Normalization of a (near) zero vector was requested."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class NonConvergenceError(DDOptError, RuntimeError):
    """An iterative routine hit its iteration cap."""

    def __init__(self, message, residual=float("nan")):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


class StabilityError(DDOptError, ValueError):
    pass


class SingularityError(DDOptError, ArithmeticError):
    pass


class FeasibilityError(DDOptError, ValueError):
    pass


class MassError(DDOptError, ValueError):
    pass


class UnsupportedCertificateError(DDOptError, NotImplementedError):
    pass


class InsufficientDataError(DDOptError, ValueError):
    pass


class ConfigError(DDOptError, ValueError):
    pass
