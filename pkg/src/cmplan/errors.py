"""Exception types shared across the toolkit."""


class ContractViolationError(ValueError):
    """An input violated a documented precondition (dimension, range, ...)."""


class ProjectionFailureError(RuntimeError):
    """Manifold projection did not converge within the iteration budget."""

    def __init__(self, message, last_iterate=None, residual_norm=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.residual_norm = residual_norm


class IKFailureError(RuntimeError):
    """Inverse kinematics did not reach the pose tolerance."""

    def __init__(self, message, best_q=None, best_error=None):
        super().__init__(message)
        self.best_q = best_q
        self.best_error = best_error


class SamplingExhaustedError(RuntimeError):
    """Repeated attempts failed to produce a valid manifold sample."""


class BandTooTightError(RuntimeError):
    """Rejection band acceptance rate fell below the viability threshold."""

    def __init__(self, message, acceptance_rate=None, probe_size=None):
        super().__init__(message)
        self.acceptance_rate = acceptance_rate
        self.probe_size = probe_size


class SpeedSingularityError(RuntimeError):
    """Predicted-speed denominator was non-positive at a query point."""


class PlannerFailureError(RuntimeError):
    """Planning aborted on a non-finite gradient or invalid state."""


class CheckpointError(RuntimeError):
    """Checkpoint payload is corrupted, incompatible, or mismatched."""


class NoPathError(RuntimeError):
    """Graph search found no route between the requested nodes."""


class MeshFormatError(ValueError):
    """Mesh file could not be parsed or fails basic validity checks."""
