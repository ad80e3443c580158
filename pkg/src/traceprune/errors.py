"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with an operation."""


class GraphError(RuntimeError):
    """Autograd misuse, e.g. calling backward on a tensor with no recorded graph."""


class ConfigError(ValueError):
    """Invalid model or training configuration."""


class EncodingError(ValueError):
    """Text contains a character the vocabulary does not know."""


class SequenceLengthError(ValueError):
    """Input sequence is longer than the model's context length."""


class AlignmentError(ValueError):
    """Two parameter-shaped collections do not line up by name and shape."""


class HorizonError(ValueError):
    """Importance lookback horizon is out of range for the available history."""


class EmptyTrackerError(RuntimeError):
    """Scores were requested from a tracker that has not seen any update."""


class TrainingDivergence(RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss


class CheckpointFormatError(ValueError):
    """Checkpoint file is truncated, corrupt or of an unknown version."""
