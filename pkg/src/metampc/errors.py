"""Exception types raised by metampc."""


class MetaMpcError(Exception):
    """Base class for all metampc errors."""


class NotPSD(MetaMpcError):
    """A matrix could not be factorized even after maximal jitter."""


class DimensionMismatch(MetaMpcError, ValueError):
    """Array shapes do not agree with the basis or model they are used with."""


class OptimFailed(MetaMpcError):
    """Meta-training could not find a descent step."""


class SolveFailed(MetaMpcError):
    """The optimal control problem has a non-finite cost at its starting point."""


class ProjectionDiverged(MetaMpcError):
    """Projection onto the track centerline did not converge."""


class EmptyLog(MetaMpcError):
    """A trajectory log has no steps to compare."""


class ConfigError(MetaMpcError):
    """An experiment configuration is invalid."""


class AcceptanceFailed(MetaMpcError):
    """An experiment ran but did not meet its acceptance thresholds."""


class EpisodeFailed(MetaMpcError):
    """A data-collection episode ended before recording its task."""
