"""Exception types shared across the package."""


class QnnError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(QnnError):
    """Tensor or mask shapes are inconsistent with the requested operation."""


class MaskError(QnnError):
    """A mask edit would leave the network graph in an inconsistent state."""


class FormatError(QnnError):
    """A model or dataset file does not match its declared binary format."""


class TrainingDiverged(QnnError):
    """Training loss became non-finite.

    Carries the last finite-loss snapshot of the network so callers can
    recover instead of losing the run.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
