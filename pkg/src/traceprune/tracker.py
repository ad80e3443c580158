"""Recency-weighted running average of every parameter, and importance scores.

After update ``e`` (1-based) the shadow copy holds

    q = sum_{j=1..e} j * p_j / sum_{j=1..e} j

maintained incrementally as ``q_new = (q_old * S_prev + p * (n + 1)) / S``
where ``n`` updates have already been applied, ``S_prev = n(n+1)/2`` and
``S = (n+1)(n+2)/2``. The shadow is kept in float64 so the running form stays
within 1e-5 of a brute-force recomputation over long runs.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import AlignmentError, EmptyTrackerError, HorizonError
from .model import ParamStore


def triangular(n: int) -> int:
    return n * (n + 1) // 2


@dataclass
class TrackerState:
    shadow: dict[str, np.ndarray]
    step: int = 0

    @property
    def weight_sum(self) -> int:
        return triangular(self.step)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.shadow.items()}

    def copy(self) -> "TrackerState":
        return TrackerState({k: v.copy() for k, v in self.shadow.items()}, self.step)


def init_tracker(model: ParamStore) -> TrackerState:
    return TrackerState({name: np.zeros(t.shape, dtype=np.float64) for name, t in model.items()}, 0)


def _check_aligned(state: TrackerState, arrays: Mapping[str, np.ndarray]) -> None:
    if list(state.shadow) != list(arrays):
        raise AlignmentError("tracker and model parameter names differ")
    for name, q in state.shadow.items():
        if q.shape != arrays[name].shape:
            raise AlignmentError(f"{name}: tracker shape {q.shape} != model shape {arrays[name].shape}")


def update_tracker(state: TrackerState, model: ParamStore | Mapping[str, np.ndarray]) -> TrackerState:
    """Fold the model's current values into the running average (in place)."""
    arrays = model.arrays() if isinstance(model, ParamStore) else model
    _check_aligned(state, arrays)
    n = state.step
    s_prev = float(triangular(n))
    s_new = float(triangular(n + 1))
    w = float(n + 1)
    for name, q in state.shadow.items():
        p = arrays[name]
        q *= s_prev
        q += w * np.asarray(p, dtype=np.float64)
        q /= s_new
    state.step = n + 1
    return state


def importance_from_history(history, n: Optional[int] = None, k: Optional[int] = None):
    """Epoch-weighted mean over the last ``k + 1`` of ``n`` logged values.

    ``history[e - 1]`` is the value logged at epoch ``e``; a leading axis of
    length >= n is expected, any trailing axes are scored independently.
    ``k`` defaults to ``n - 1`` (the whole history).
    """
    h = np.asarray(history, dtype=np.float64)
    if n is None:
        n = h.shape[0]
    if n < 1 or h.shape[0] < n:
        raise HorizonError(f"need at least n={n} >= 1 logged epochs, have {h.shape[0]}")
    if k is None:
        k = n - 1
    if not 0 <= k <= n - 1:
        raise HorizonError(f"lookback k={k} must satisfy 0 <= k <= n-1 = {n - 1}")
    epochs = np.arange(n - k, n + 1, dtype=np.float64)
    vals = h[n - k - 1:n]
    weights = epochs.reshape((-1,) + (1,) * (vals.ndim - 1))
    out = (vals * weights).sum(axis=0) / epochs.sum()
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class ImportanceVector:
    """Per-entry scores for the prunable tensors, concatenated in store order."""

    scores: np.ndarray
    names: tuple[str, ...]
    shapes: tuple[tuple[int, ...], ...]
    k: Optional[int] = None

    def __len__(self) -> int:
        return self.scores.size

    @property
    def offsets(self) -> list[int]:
        sizes = [int(np.prod(s)) for s in self.shapes]
        return list(np.concatenate([[0], np.cumsum(sizes)]).astype(int))

    def split(self) -> dict[str, np.ndarray]:
        off = self.offsets
        return {
            name: self.scores[off[i]:off[i + 1]].reshape(shape)
            for i, (name, shape) in enumerate(zip(self.names, self.shapes))
        }

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], k: Optional[int] = None) -> "ImportanceVector":
        names = tuple(arrays)
        shapes = tuple(np.shape(arrays[n]) for n in names)
        flat = [np.asarray(arrays[n], dtype=np.float64).reshape(-1) for n in names]
        scores = np.concatenate(flat) if flat else np.zeros(0)
        return cls(scores, names, shapes, k)


def importance_scores(state: TrackerState, prunable: Optional[Iterable[str]] = None) -> ImportanceVector:
    """``|shadow|`` for every entry of the selected tensors."""
    if state.step == 0:
        raise EmptyTrackerError("tracker has no updates yet; train before scoring")
    names = list(state.shadow) if prunable is None else list(prunable)
    missing = [n for n in names if n not in state.shadow]
    if missing:
        raise KeyError(f"not tracked: {missing}")
    return ImportanceVector.from_arrays({n: np.abs(state.shadow[n]) for n in names}, k=state.step - 1)


class TraceRecorder:
    """Logs the live value of a small random sample of weights after every update.

    Only ``n_samples`` scalars per step are kept, so trajectories can be
    plotted without storing the full parameter history.
    """

    def __init__(self, model: ParamStore, n_samples: int = 64, seed: int = 0,
                 names: Optional[Sequence[str]] = None):
        names = list(names) if names is not None else model.prunable_names()
        sizes = np.array([model[n].size for n in names])
        total = int(sizes.sum())
        rng = np.random.Generator(np.random.PCG64(seed))
        flat = np.sort(rng.choice(total, size=min(n_samples, total), replace=False))
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        which = np.searchsorted(starts, flat, side="right") - 1
        self.samples: list[tuple[str, int]] = [(names[w], int(f - starts[w])) for w, f in zip(which, flat)]
        self.values: list[np.ndarray] = []

    @property
    def ids(self) -> list[str]:
        return [f"{name}[{idx}]" for name, idx in self.samples]

    def record(self, model: ParamStore) -> None:
        self.values.append(np.array([model[n].data.reshape(-1)[i] for n, i in self.samples], dtype=np.float32))

    def histories(self) -> dict[str, np.ndarray]:
        if not self.values:
            return {wid: np.zeros(0, dtype=np.float32) for wid in self.ids}
        table = np.stack(self.values)
        return {wid: table[:, j] for j, wid in enumerate(self.ids)}

    def table(self) -> np.ndarray:
        if not self.values:
            return np.zeros((0, len(self.samples)), dtype=np.float32)
        return np.stack(self.values)

    def load_table(self, table: np.ndarray) -> None:
        self.values = [row.astype(np.float32) for row in np.asarray(table)]


def export_traces(histories: Mapping[str, Sequence[float]], out: str | Path) -> Path:
    """Write ``weight_id,epoch,value`` rows (epochs are 1-based).

    Values are written with ``repr`` so re-parsing returns the logged floats exactly.
    """
    if not histories or all(len(v) < 2 for v in histories.values()):
        raise ValueError("need at least one sampled weight with two or more logged epochs")
    out = Path(out)
    with out.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["weight_id", "epoch", "value"])
        for wid, vals in histories.items():
            for e, v in enumerate(vals, start=1):
                w.writerow([wid, e, repr(float(v))])
    return out


def read_traces(path: str | Path) -> dict[str, list[float]]:
    out: dict[str, list[float]] = {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["weight_id"], []).append(float(row["value"]))
    return out
