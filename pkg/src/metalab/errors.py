"""Exception types raised across metalab.

Numerical failures derive from :class:`NumericalFailure` so the command line
can map them onto a single exit code.
"""


class MetalabError(Exception):
    """Base class for all package errors."""


class NumericalFailure(MetalabError):
    """A numerical routine could not deliver a trustworthy answer."""


class AssumptionFailure(MetalabError):
    """A model violates one of the standing structural assumptions."""


class OutsideChart(MetalabError, ValueError):
    """Point lies at or beyond the chart validity radius of a surface."""


class OnSurface(MetalabError, ValueError):
    """Point lies on the surface, so its normal direction is undefined."""


class NonInvariantField(AssumptionFailure):
    """A vector field does not vanish on (or is not tangent to) a surface."""


class EllipticityFailure(AssumptionFailure):
    """The angular generator is not elliptic on the sphere bundle."""


class SingularSolve(NumericalFailure):
    """A linear system that should be regular is numerically singular."""


class NoConvergence(NumericalFailure):
    """An iterative method exhausted its iteration budget."""


class DegenerateCase(NumericalFailure):
    """Averaged coefficients coincide, so no nonzero exponent is defined."""


class NoBracket(NumericalFailure):
    """No sign change of the eigenvalue curve was found."""


class NonFinite(NumericalFailure):
    """A trajectory produced a non-finite state or left its bounding box."""


class TooManyTimeouts(NumericalFailure):
    """More trajectories timed out than the estimator tolerates."""


class TimeoutDominated(TooManyTimeouts):
    """Exit-time statistics are dominated by trajectories hitting the cap."""


class AbsorptionFailure(NumericalFailure):
    """The transient block of an absorbing chain is singular."""


class SchemaError(MetalabError, ValueError):
    """A model file does not conform to the expected JSON layout.

    Parameters
    ----------
    message : str
        Human readable description.
    pointer : str
        JSON pointer of the offending location, ``""`` for the document root.
    """

    def __init__(self, message, pointer=""):
        self.pointer = pointer
        super().__init__(f"{pointer or '/'}: {message}")


class AssumptionWarning(UserWarning):
    """Non-fatal report that a sampled assumption check failed."""
