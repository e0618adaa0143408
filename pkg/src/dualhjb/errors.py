"""Exception hierarchy shared by every module."""


class DualHJBError(Exception):
    """Base class for all package errors."""


class DomainError(DualHJBError, ValueError):
    """An argument lies outside the domain of the operation."""


class ConfigError(DualHJBError, ValueError):
    """Invalid scenario or model parameters.

    ``path`` names the offending field (e.g. ``market.sigma[0]``) when known.
    """

    def __init__(self, message: str, path: str | None = None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class SolverError(DualHJBError, RuntimeError):
    """An iterative solver failed to converge."""


class RangeError(DualHJBError, ArithmeticError):
    """A root could not be bracketed within the representable range."""


class CapabilityError(DualHJBError, TypeError):
    """The requested quantity is undefined for this utility family."""


class SimulationError(DualHJBError, RuntimeError):
    """A Monte Carlo run produced an inadmissible state."""
