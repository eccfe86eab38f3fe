"""Exception hierarchy shared across the package."""


class AtsegError(Exception):
    """Base class for all package-specific errors."""


class UsageError(AtsegError):
    """Invalid input or configuration supplied by the caller."""


class PgmParseError(UsageError):
    """Malformed PGM file.

    Carries the byte offset at which parsing failed.
    """

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class NumericalError(AtsegError):
    """A numerical procedure failed; maps to CLI exit code 3."""


class MeshTanglingError(NumericalError):
    """A mesh operation produced an element with non-positive volume."""


class OutOfDomainError(NumericalError):
    """A query point lies outside the mesh domain beyond tolerance."""


class FlatImageError(NumericalError):
    """The input image has zero gradient everywhere; segmentation is meaningless."""


class IntegratorFailureError(NumericalError):
    """Time integration failed hard (step size underflow, repeated divergence).

    Carries the state at failure so the driver can persist a snapshot.
    """

    def __init__(self, message, t=None, y=None, dt=None):
        super().__init__(message)
        self.t = t
        self.y = y
        self.dt = dt


class PhiBoundsError(NumericalError):
    """The phase field left the monitored band [-0.05, 1.05]."""
