"""Prune a character-level Transformer by the recency-weighted history of its weights."""

__version__ = "0.1.0"

from .errors import (AlignmentError, CheckpointFormatError, ConfigError, DimensionError, EmptyTrackerError,
                     EncodingError, GraphError, HorizonError, SequenceLengthError, TrainingDivergence)
from .model import ModelConfig, ParamStore, Vocab, build_model, build_vocab, count_params, forward
from .pruner import (PruneMask, apply_mask, build_mask, compute_threshold, enforce_mask_on_gradients,
                     mask_for_target, mask_from_rate)
from .tensor import Tensor
from .tracker import (ImportanceVector, TrackerState, export_traces, importance_from_history,
                      importance_scores, init_tracker, update_tracker)
