"""Exception types shared across the toolkit."""


class ProtoAnchorError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(ProtoAnchorError):
    """Tensor shapes or axes are inconsistent with the operation."""


class ArgumentError(ProtoAnchorError):
    """An argument value is outside the operation's contract."""


class DomainError(ProtoAnchorError):
    """A mathematical domain violation (log of a non-positive entry, ...)."""


class DegenerateInputError(ProtoAnchorError):
    """Input carries no usable structure (e.g. an all-zero spectrum)."""


class StateError(ProtoAnchorError):
    """Operation invoked in an invalid recording/training state."""


class NumericError(ProtoAnchorError):
    """A non-finite value appeared where finite values are required."""


class ConfigurationError(ProtoAnchorError):
    """Experiment or dataset configuration is inconsistent."""


class CheckpointError(ProtoAnchorError):
    """Checkpoint file is corrupt or does not match the expected config."""


class TrainingError(ProtoAnchorError):
    """Meta-training aborted; carries the failing iteration index."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


class AdaptationError(ProtoAnchorError):
    """Test-time adaptation failed; carries epoch and task context."""

    def __init__(self, message: str, epoch: int | None = None, task_id: str | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.task_id = task_id
