"""Exception types raised across the package."""


class ReconError(Exception):
    """Base class for all package errors."""


class DepthNonPositive(ReconError, ValueError):
    pass


class InvalidRange(ReconError, ValueError):
    pass


class OutOfBounds(ReconError, IndexError):
    pass


class NoSourceViews(ReconError, ValueError):
    pass


class InvalidQ(ReconError, ValueError):
    pass


class NonFiniteGradient(ReconError, FloatingPointError):
    pass


class DivergenceDetected(ReconError, RuntimeError):
    pass


class EmptyReconstruction(ReconError, RuntimeError):
    pass


class ImageTooSmall(ReconError, ValueError):
    pass


class EmptyCloud(ReconError, ValueError):
    pass


class DimensionMismatch(ReconError, ValueError):
    pass


class InvalidConfig(ReconError, ValueError):
    """Bad configuration; ``field`` names the offending path when known."""

    def __init__(self, message, field=None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


class CorruptCheckpoint(ReconError, ValueError):
    pass
