"""Exception hierarchy shared across the library."""


class SpinKitError(Exception):
    """Base class for all library errors."""


class DegenerateConfiguration(SpinKitError):
    """Point sets too flat/collinear for a unique rigid fit."""


class DegeneratePatch(SpinKitError):
    """Patch covariance has rank < 2; no stable reference axis exists."""


class ShapeMismatch(SpinKitError):
    """Tensor or parameter shapes are inconsistent with the operation."""


class NoForwardRecorded(SpinKitError):
    """backward() called on a value with no recorded computation graph."""


class EmptyVolume(SpinKitError):
    """Every voxel of a cylindrical volume is empty."""


class BatchTooSmall(SpinKitError):
    """Contrastive loss needs at least two anchor/positive pairs."""


class InsufficientOverlap(SpinKitError):
    """Fragment pair does not expose enough corresponding anchors."""


class NoConsensus(SpinKitError):
    """RANSAC found no hypothesis with a minimal inlier set."""


class ParseError(SpinKitError):
    """Malformed text input. Carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MagicMismatch(SpinKitError):
    """Binary file does not start with the expected magic string."""
