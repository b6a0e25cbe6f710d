"""Exception hierarchy shared by the ksestab modules."""


class KsestabError(Exception):
    """Base class for all ksestab errors."""


class NotControllable(KsestabError):
    """The (A0, B0) pair (or its observer dual) fails the Kalman rank test."""


class IllConditionedPlacement(KsestabError):
    """Eigenvalue assignment could not produce a well-conditioned gain."""


class OrderTooSmall(KsestabError):
    """Observer order N does not exceed the number of unstable modes N0."""


class NotHurwitz(KsestabError):
    """F + delta*I has an eigenvalue with nonnegative real part."""


class DimensionMismatch(KsestabError):
    pass


class NonPositiveValues(KsestabError):
    pass


class BlowUp(KsestabError):
    """A closed-loop simulation left the region where the local result applies.

    The partial trajectory up to the failure time is attached so that basin
    probing sweeps can still report it.
    """

    def __init__(self, time, message="", trajectory=None):
        super().__init__(message or f"simulation blew up at t={time:.6g}")
        self.time = time
        self.trajectory = trajectory


class ConfigError(KsestabError):
    """A run configuration is malformed or inconsistent."""
