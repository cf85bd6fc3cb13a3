"""Exception hierarchy shared by all hppt modules."""


class HpptError(Exception):
    """Base class for every error raised by this package."""


class RangeError(HpptError, ValueError):
    """A numeric argument is outside its permitted interval."""


class ConflictError(HpptError, ValueError):
    """An identifier is already taken (duplicate class, duplicate node)."""


class NotFoundError(HpptError, LookupError):
    """A referenced node or class does not exist."""


class DimensionError(HpptError, ValueError):
    """Array shapes do not conform."""


class ConvergenceError(HpptError, RuntimeError):
    """An iterative solver did not converge; carries the last residual."""

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


class DivergenceError(HpptError, RuntimeError):
    """A training loss became non-finite."""


class DegeneracyError(HpptError, ValueError):
    """A quantity that must be strictly positive collapsed to zero or below."""


class MissingDataError(HpptError, LookupError):
    """A metric was asked for an entry the table does not contain."""


class ConfigError(HpptError, ValueError):
    """An experiment or stream configuration is invalid or impossible."""


class IncompatibilityError(HpptError, ValueError):
    """Artifacts that must match (e.g. stream manifests) do not."""


class ArgumentError(HpptError, ValueError):
    """A structurally invalid argument, e.g. an empty prediction map."""
