class DissRabiError(Exception):
    """Base class for package errors."""


class ResourceError(DissRabiError):
    """A requested problem exceeds the configured memory budget."""


class SolverError(DissRabiError):
    """An iterative or eigen solver failed to converge."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class StiffnessError(SolverError):
    """Adaptive integration collapsed its step size."""


class StepSizeError(DissRabiError):
    """Jump probabilities within one trajectory step reach or exceed one."""
