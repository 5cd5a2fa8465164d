"""
Exception hierarchy for the attention patch lab.

Every error raised on purpose by the package derives from LabError so the
CLI can tell expected failures (bad config, missing checkpoint) from bugs.
"""


class LabError(Exception):
    """Base class for all expected failures."""
    pass


class ShapeError(LabError, ValueError):
    """Operand shapes are incompatible."""
    pass


class UsageError(LabError, ValueError):
    """An operation was called outside its contract (non-scalar backward, bad step, ...)."""
    pass


class IndexRangeError(LabError, IndexError):
    """Head, layer or token index out of range."""
    pass


class DegenerateInputError(LabError, ValueError):
    """Input carries no usable magnitude (all-zero rows for l1,2 normalization)."""
    pass


class ConfigError(LabError):
    """Run configuration is invalid."""
    pass


class TrainingError(LabError):
    """Training diverged."""

    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class CheckpointError(LabError):
    """Checkpoint file is malformed or has an unsupported version."""
    pass


class PatchPlacementError(LabError, ValueError):
    """Patch does not fit inside the image or is not aligned with a token."""
    pass


class AttackError(LabError):
    """PGD attack aborted (non-finite loss)."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration
