"""Exception hierarchy shared across the package."""


class KnotPFError(Exception):
    """Base class for all package errors."""


class DimensionError(KnotPFError):
    """Operands have incompatible shapes (kernel/measure/function mismatch)."""


class DomainError(KnotPFError):
    """A value lies outside its admissible domain (negative weight, bad parameter)."""


class DegenerateModelError(KnotPFError):
    """A model assigns zero total mass somewhere every downstream formula divides by."""


class CompatibilityError(KnotPFError):
    """A knot does not factorise the kernel it claims to act on."""


class DegenerateWeightsError(KnotPFError):
    """Every particle weight is zero (or -inf in log space).

    ``step`` carries the time index at which the particle system collapsed,
    and ``replication`` the replication index when raised from the empirical
    harness.
    """

    def __init__(self, message, step=None, replication=None):
        super().__init__(message)
        self.step = step
        self.replication = replication


class NumericalError(KnotPFError):
    """A numerical routine failed (e.g. a covariance stopped being positive definite)."""


class ConfigError(KnotPFError):
    """An experiment configuration is malformed; message carries the field path."""


class FileError(KnotPFError):
    """A required input file (e.g. an observation dataset) is missing or unreadable."""
