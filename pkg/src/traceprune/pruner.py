"""Turn importance scores into an unstructured prune mask and keep it applied.

An entry is pruned when its score is strictly below the threshold
``std(scores) * prune_rate`` (population standard deviation, one global
threshold by default). :func:`mask_for_target` goes the other way: it picks
the threshold that hits a requested compression and reports the equivalent
prune rate, so both pathways produce the same mask.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Union

import numpy as np

from .errors import AlignmentError
from .model import ParamStore
from .tracker import ImportanceVector

Scores = Union[ImportanceVector, np.ndarray]


@dataclass
class PruneMask:
    """``masks[name]`` is True where the entry is kept."""

    masks: dict[str, np.ndarray]
    threshold: float
    prune_rate: float
    target_compression: Optional[float] = None
    layer_thresholds: Optional[dict[str, float]] = None

    @property
    def n_total(self) -> int:
        return sum(m.size for m in self.masks.values())

    @property
    def n_pruned(self) -> int:
        return sum(int(m.size - np.count_nonzero(m)) for m in self.masks.values())

    @property
    def achieved_compression(self) -> float:
        total = self.n_total
        return self.n_pruned / total if total else 0.0

    def pruned_set(self) -> np.ndarray:
        """Flat indices (store order) of pruned entries."""
        return np.flatnonzero(~np.concatenate([m.reshape(-1) for m in self.masks.values()]))


def _flat(scores: Scores) -> np.ndarray:
    arr = scores.scores if isinstance(scores, ImportanceVector) else np.asarray(scores, dtype=np.float64)
    return arr.reshape(-1)


def _as_vector(scores: Scores) -> ImportanceVector:
    if isinstance(scores, ImportanceVector):
        return scores
    arr = np.asarray(scores, dtype=np.float64)
    return ImportanceVector(arr.reshape(-1), ("scores",), (arr.shape,))


def compute_threshold(scores: Scores, prune_rate: float) -> float:
    flat = _flat(scores)
    if flat.size == 0:
        raise ValueError("cannot compute a threshold from empty scores")
    if prune_rate < 0:
        raise ValueError(f"prune_rate must be >= 0, got {prune_rate}")
    return float(np.std(flat, dtype=np.float64)) * float(prune_rate)


def build_mask(scores: Scores, threshold: float, *, prune_rate: float = math.nan,
               target: Optional[float] = None) -> PruneMask:
    """Prune every entry with ``score < threshold``; ties are kept."""
    if threshold < 0:
        raise ValueError(f"threshold must be >= 0, got {threshold}")
    vec = _as_vector(scores)
    masks = {name: s >= threshold for name, s in vec.split().items()}
    return PruneMask(masks, float(threshold), float(prune_rate), target)


def mask_from_rate(scores: Scores, prune_rate: float, *, per_layer: bool = False) -> PruneMask:
    """Rate pathway. With ``per_layer`` each tensor gets ``std(tensor) * rate``."""
    vec = _as_vector(scores)
    if not per_layer:
        return build_mask(vec, compute_threshold(vec, prune_rate), prune_rate=prune_rate)
    masks, thresholds = {}, {}
    for name, s in vec.split().items():
        thr = compute_threshold(s, prune_rate)
        thresholds[name] = thr
        masks[name] = s >= thr
    return PruneMask(masks, math.nan, float(prune_rate), None, thresholds)


def mask_for_target(scores: Scores, target: float) -> PruneMask:
    """Mask pruning ``round(target * N)`` entries, at most N - 1 (fewer only under exact ties).

    The threshold is placed midway between the last pruned and first kept
    sorted score, so ``std * (threshold / std)`` lands on the same side of
    every score and the rate pathway reproduces this mask.
    """
    if not 0.0 <= target < 1.0:
        raise ValueError(f"target compression must be in [0, 1), got {target}")
    vec = _as_vector(scores)
    flat = vec.scores
    if flat.size == 0:
        raise ValueError("cannot build a mask from empty scores")
    if flat.min() < 0:
        raise ValueError("importance scores must be non-negative")
    # A target below 1 never prunes everything, even when rounding would.
    k = min(int(round(target * flat.size)), flat.size - 1)
    sigma = float(np.std(flat, dtype=np.float64))
    if k == 0:
        return build_mask(vec, 0.0, prune_rate=0.0, target=target)
    if sigma == 0:
        # All scores equal: every entry ties at the cut and stays.
        return build_mask(vec, 0.0, prune_rate=0.0, target=target)
    part = np.partition(flat, (k - 1, k))
    lo, hi = float(part[k - 1]), float(part[k])
    if lo == hi:
        # A tie straddles the cut: keep the whole tied group.
        below = flat[flat < hi]
        lo = float(below.max()) if below.size else -math.inf
    threshold = 0.5 * (lo + hi) if math.isfinite(lo) else hi
    rate = threshold / sigma
    threshold = sigma * rate
    # Recomputing from the rate must land in (lo, hi]; nudge by ulps if rounding pushed it out.
    for _ in range(64):
        if threshold <= lo:
            rate = float(np.nextafter(rate, np.inf))
        elif threshold > hi:
            rate = float(np.nextafter(rate, -np.inf))
        else:
            break
        threshold = sigma * rate
    return build_mask(vec, threshold, prune_rate=rate, target=target)


def _check_aligned(model: ParamStore, arrays: Mapping[str, np.ndarray]) -> None:
    for name, m in arrays.items():
        if name not in model:
            raise AlignmentError(f"mask names unknown parameter {name!r}")
        if model[name].shape != m.shape:
            raise AlignmentError(f"{name}: mask shape {m.shape} != parameter shape {model[name].shape}")


def apply_mask(model: ParamStore, mask: PruneMask) -> None:
    """Set pruned entries of the live model to exactly 0.0; kept entries are untouched."""
    _check_aligned(model, mask.masks)
    for name, keep in mask.masks.items():
        model[name].data[~keep] = 0.0


def enforce_mask_on_gradients(model: ParamStore, mask: PruneMask) -> None:
    """Zero gradients at pruned positions so an optimizer step cannot revive them."""
    for name, keep in mask.masks.items():
        g = model[name].grad
        if g is not None:
            g[~keep] = 0.0


def model_sparsity(model: ParamStore, names=None) -> float:
    """Fraction of exactly-zero entries over ``names`` (default: every parameter)."""
    names = model.names() if names is None else list(names)
    total = sum(model[n].size for n in names)
    zeros = sum(model[n].size - int(np.count_nonzero(model[n].data)) for n in names)
    return zeros / total if total else 0.0
