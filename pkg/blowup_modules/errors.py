class BlowupError(Exception):
    """Base class for every error raised by blowup_modules."""


class DomainError(BlowupError, ValueError):
    """Argument outside the domain of the operation (t <= 0, r > t, beta <= 1/2, ...)."""


class PreconditionError(BlowupError, ValueError):
    """Input data violates a stated precondition (integrability, endpoint behaviour)."""


class ConfigurationError(BlowupError, ValueError):
    """Grid or parameter choice cannot support the requested computation."""


class StateError(BlowupError, RuntimeError):
    """Operation called on an object that does not yet hold the required data."""


class ConvergenceError(BlowupError, RuntimeError):
    """Series or iteration did not reach its tolerance."""


class AccuracyError(BlowupError, RuntimeError):
    """A monitored accuracy check (Wronskian spread, quadrature tail, tail fit) failed."""


class DivergenceError(BlowupError, RuntimeError):
    """Fixed-point increments grew over consecutive iterations."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])
