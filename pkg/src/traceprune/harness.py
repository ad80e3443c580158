"""Training, tracked-weight pruning, masked fine-tuning and the compression sweep.

One "step" is one optimizer update on a batch of random contiguous windows.
Batches come from a PCG64 generator seeded with ``TrainConfig.seed``;
fine-tuning and evaluation use separate PCG64 streams derived from the same
seed, so evaluation never perturbs the training stream and a resumed run is
bitwise identical to an uninterrupted one.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import model as M
from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import ConfigError, TrainingDivergence
from .model import ModelConfig, ParamStore, Vocab
from .optim import AdamW
from .pruner import (PruneMask, apply_mask, enforce_mask_on_gradients, mask_for_target,
                     mask_from_rate, model_sparsity)
from .tracker import TraceRecorder, TrackerState, importance_scores, init_tracker, update_tracker

log = logging.getLogger(__name__)

FINETUNE_STREAM = 1
EVAL_STREAM = 2


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    batch_size: int = 64
    learn_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    eval_interval: int = 500
    eval_batches: int = 20
    finetune_steps: int = 50
    finetune_lr: Optional[float] = None
    split: float = 0.9
    seed: int = 1337
    trace_samples: int = 64

    def validate(self) -> None:
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if not 0.0 < self.split < 1.0:
            raise ConfigError(f"split must be in (0, 1), got {self.split}")
        if self.finetune_steps < 0:
            raise ConfigError(f"finetune_steps must be >= 0, got {self.finetune_steps}")
        if self.batch_size < 1 or self.eval_batches < 1:
            raise ConfigError("batch_size and eval_batches must be >= 1")
        if self.learn_rate <= 0:
            raise ConfigError(f"learn_rate must be positive, got {self.learn_rate}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def config_hash(mcfg: ModelConfig, tcfg: TrainConfig) -> str:
    blob = json.dumps({"model": mcfg.to_dict(), "train": tcfg.to_dict()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def corpus_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_corpus(path: str | Path, split: float = 0.9) -> tuple[Vocab, np.ndarray, np.ndarray]:
    """Vocabulary plus a contiguous train/val split of the encoded text."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"corpus not found: {path}")
    text = path.read_text(encoding="utf-8")
    if not text:
        raise ValueError(f"corpus is empty: {path}")
    if not 0.0 < split < 1.0:
        raise ConfigError(f"split must be in (0, 1), got {split}")
    vocab = M.build_vocab(text)
    ids = vocab.encode(text).astype(np.int32)
    n = int(split * len(ids))
    return vocab, ids[:n], ids[n:]


def sample_batch(ids: np.ndarray, batch_size: int, context_len: int,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if len(ids) <= context_len:
        raise ValueError(f"need more than context_len={context_len} tokens, have {len(ids)}")
    starts = rng.integers(0, len(ids) - context_len, size=batch_size)
    idx = starts[:, None] + np.arange(context_len)
    return ids[idx], ids[idx + 1]


def _stream(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, stream])))


def evaluate(params: ParamStore, mcfg: ModelConfig, ids: np.ndarray, tcfg: TrainConfig) -> float:
    """Mean cross-entropy over a fixed, seed-determined set of windows of ``ids``."""
    rng = _stream(tcfg.seed, EVAL_STREAM)
    total = 0.0
    with T.no_grad():
        for _ in range(tcfg.eval_batches):
            x, y = sample_batch(ids, tcfg.batch_size, mcfg.context_len, rng)
            total += M.loss(params, mcfg, x, y).item()
    return total / tcfg.eval_batches


@dataclass
class LossLog:
    """Per-step training loss and periodic validation loss."""

    rows: list[list] = field(default_factory=list)

    def append(self, step: int, train_loss: float, val_loss: Optional[float] = None) -> None:
        self.rows.append([step, train_loss, val_loss])

    def set_val(self, step: int, val_loss: float) -> None:
        if self.rows and self.rows[-1][0] == step:
            self.rows[-1][2] = val_loss
        else:
            self.rows.append([step, None, val_loss])

    @property
    def train_losses(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows if r[1] is not None], dtype=np.float64)

    @property
    def val_losses(self) -> list[tuple[int, float]]:
        return [(r[0], r[2]) for r in self.rows if r[2] is not None]

    def smoothed(self, window: int = 100) -> np.ndarray:
        x = self.train_losses
        if x.size < window:
            return x.copy()
        c = np.cumsum(np.concatenate([[0.0], x]))
        return (c[window:] - c[:-window]) / window

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "train_loss", "val_loss"])
            for step, tr, va in self.rows:
                w.writerow([step, "" if tr is None else repr(tr), "" if va is None else repr(va)])
        return path


class Trainer:
    """Owns the live model, optimizer, tracker, batch stream and loss log."""

    def __init__(self, params: ParamStore, mcfg: ModelConfig, tcfg: TrainConfig,
                 train_ids: np.ndarray, val_ids: np.ndarray, *, track: bool = True,
                 mask: Optional[PruneMask] = None, rng: Optional[np.random.Generator] = None,
                 learn_rate: Optional[float] = None):
        tcfg.validate()
        self.params = params
        self.mcfg = mcfg
        self.tcfg = tcfg
        self.train_ids = train_ids
        self.val_ids = val_ids
        self.optimizer = AdamW(params, lr=learn_rate or tcfg.learn_rate, betas=(tcfg.beta1, tcfg.beta2),
                               eps=tcfg.adam_eps, weight_decay=tcfg.weight_decay)
        self.tracker: Optional[TrackerState] = init_tracker(params) if track else None
        self.recorder: Optional[TraceRecorder] = (
            TraceRecorder(params, tcfg.trace_samples, seed=tcfg.seed) if track and tcfg.trace_samples else None
        )
        self.mask = mask
        self.rng = rng or np.random.Generator(np.random.PCG64(tcfg.seed))
        self.step = 0
        self.log = LossLog()

    def train_step(self) -> float:
        x, y = sample_batch(self.train_ids, self.tcfg.batch_size, self.mcfg.context_len, self.rng)
        loss = M.loss(self.params, self.mcfg, x, y, training=True, rng=self.rng)
        value = loss.item()
        step = self.step + 1
        if not math.isfinite(value):
            raise TrainingDivergence(step, value)
        self.params.zero_grad()
        loss.backward()
        if self.mask is not None:
            enforce_mask_on_gradients(self.params, self.mask)
        self.optimizer.step()
        if self.tracker is not None:
            update_tracker(self.tracker, self.params)
        if self.recorder is not None:
            self.recorder.record(self.params)
        self.step = step
        self.log.append(step, value)
        return value

    def evaluate(self, split: str = "val") -> float:
        ids = self.val_ids if split == "val" else self.train_ids
        return evaluate(self.params, self.mcfg, ids, self.tcfg)

    def run(self, n_steps: int, *, eval_interval: Optional[int] = None, final_eval: bool = True) -> Optional[float]:
        """Run ``n_steps`` updates; returns the validation loss after the last one."""
        interval = self.tcfg.eval_interval if eval_interval is None else eval_interval
        end = self.step + n_steps
        val = None
        while self.step < end:
            tr = self.train_step()
            if interval and self.step % interval == 0 and self.step != end:
                val = self.evaluate()
                self.log.set_val(self.step, val)
                log.info("step %d  train %.4f  val %.4f", self.step, tr, val)
        if final_eval:
            val = self.evaluate()
            self.log.set_val(self.step, val)
            log.info("step %d  val %.4f", self.step, val)
        return val

    # -- checkpointing -------------------------------------------------------

    def state(self) -> tuple[dict[str, np.ndarray], dict]:
        tensors: dict[str, np.ndarray] = {}
        for k, t in self.params.items():
            tensors[f"model/{k}"] = t.data
        tensors.update(self.optimizer.state_arrays())
        if self.tracker is not None:
            for k, q in self.tracker.shadow.items():
                tensors[f"tracker/{k}"] = q
        if self.mask is not None:
            for k, m in self.mask.masks.items():
                tensors[f"mask/{k}"] = m
        if self.recorder is not None:
            tensors["trace/values"] = self.recorder.table()
        meta = {
            "format": "traceprune-run",
            "step": self.step,
            "model_config": self.mcfg.to_dict(),
            "train_config": self.tcfg.to_dict(),
            "optimizer": {"t": self.optimizer.t, "lr": self.optimizer.lr},
            "tracker_step": None if self.tracker is None else self.tracker.step,
            "rng_state": self.rng.bit_generator.state,
            "loss_log": self.log.rows,
            "trace_samples": None if self.recorder is None else [list(s) for s in self.recorder.samples],
        }
        if self.mask is not None:
            meta["mask"] = {
                "threshold": self.mask.threshold,
                "prune_rate": self.mask.prune_rate,
                "target_compression": self.mask.target_compression,
                "layer_thresholds": self.mask.layer_thresholds,
            }
        return tensors, meta

    def save(self, path: str | Path, **extra_meta) -> Path:
        tensors, meta = self.state()
        meta.update(extra_meta)
        return save_checkpoint(path, tensors, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint | str | Path, train_ids: np.ndarray,
                        val_ids: np.ndarray) -> "Trainer":
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt)
        meta = ckpt.meta
        mcfg = ModelConfig.from_dict(meta["model_config"])
        tcfg = TrainConfig.from_dict(meta["train_config"])
        with T.default_dtype(np.float32):
            params = M.build_model(mcfg)
        params.load_arrays(ckpt.group("model"))
        mask = mask_from_checkpoint(ckpt)
        track = meta.get("tracker_step") is not None
        tr = cls(params, mcfg, tcfg, train_ids, val_ids, track=track, mask=mask,
                 learn_rate=meta["optimizer"]["lr"])
        tr.optimizer.load_state_arrays(
            {k: v for k, v in ckpt.tensors.items() if k.startswith("optim.")}, meta["optimizer"]["t"])
        if track:
            shadow = ckpt.group("tracker")
            tr.tracker = TrackerState({k: np.array(shadow[k], dtype=np.float64) for k in params.names()},
                                      int(meta["tracker_step"]))
        if tr.recorder is not None:
            samples = meta.get("trace_samples")
            if samples is not None:
                tr.recorder.samples = [(n, int(i)) for n, i in samples]
                tr.recorder.load_table(ckpt.tensors["trace/values"])
        tr.rng.bit_generator.state = meta["rng_state"]
        tr.step = int(meta["step"])
        tr.log = LossLog([list(r) for r in meta.get("loss_log", [])])
        return tr


def mask_from_checkpoint(ckpt: Checkpoint) -> Optional[PruneMask]:
    masks = ckpt.group("mask")
    if not masks:
        return None
    info = ckpt.meta.get("mask", {})
    return PruneMask(dict(masks), float(info.get("threshold", math.nan)), float(info.get("prune_rate", math.nan)),
                     info.get("target_compression"), info.get("layer_thresholds"))


@dataclass
class TrainResult:
    params: ParamStore
    tracker: TrackerState
    log: LossLog
    baseline_val_loss: float
    trainer: Trainer


def train(tcfg: TrainConfig, mcfg: ModelConfig, corpus: tuple[Vocab, np.ndarray, np.ndarray]) -> TrainResult:
    """Train from scratch for ``tcfg.steps`` steps, folding every step into the tracker."""
    vocab, train_ids, val_ids = corpus
    if mcfg.vocab_size != len(vocab):
        mcfg = dataclasses.replace(mcfg, vocab_size=len(vocab))
    with T.default_dtype(np.float32):
        params = M.build_model(mcfg)
    trainer = Trainer(params, mcfg, tcfg, train_ids, val_ids)
    baseline = trainer.run(tcfg.steps)
    return TrainResult(params, trainer.tracker, trainer.log, baseline, trainer)


@dataclass
class PruneResult:
    params: ParamStore
    mask: PruneMask
    val_loss: float
    pre_finetune_loss: float
    trainer: Trainer


def prune_and_finetune(params: ParamStore, tracker: TrackerState, tcfg: TrainConfig, mcfg: ModelConfig,
                       train_ids: np.ndarray, val_ids: np.ndarray, *, target: Optional[float] = None,
                       rate: Optional[float] = None, per_layer: bool = False,
                       finetune_steps: Optional[int] = None) -> PruneResult:
    """Score by |tracked weight|, zero the low scorers in a copy of ``params``, fine-tune under the mask.

    Exactly one of ``target`` (compression fraction) or ``rate`` (prune rate
    multiplying the score standard deviation) selects the threshold.
    Fine-tuning starts from fresh optimizer moments and its own batch stream.
    """
    if (target is None) == (rate is None):
        raise ValueError("give exactly one of target or rate")
    scores = importance_scores(tracker, params.prunable_names())
    if target is not None:
        mask = mask_for_target(scores, target)
    else:
        mask = mask_from_rate(scores, rate, per_layer=per_layer)
    work = params.copy()
    apply_mask(work, mask)
    pre = evaluate(work, mcfg, val_ids, tcfg)
    steps = tcfg.finetune_steps if finetune_steps is None else finetune_steps
    ft = Trainer(work, mcfg, tcfg, train_ids, val_ids, track=False, mask=mask,
                 rng=_stream(tcfg.seed, FINETUNE_STREAM), learn_rate=tcfg.finetune_lr)
    ft.run(steps, eval_interval=0, final_eval=False)
    val = evaluate(work, mcfg, val_ids, tcfg) if steps else pre
    return PruneResult(work, mask, val, pre, ft)


SWEEP_HEADER = ["target_compression", "achieved_compression", "prune_rate", "val_loss", "baseline_val_loss"]


@dataclass
class SweepRow:
    target_compression: float
    achieved_compression: float
    prune_rate: float
    val_loss: float
    baseline_val_loss: float
    pre_finetune_loss: float
    model_sparsity: float


@dataclass
class SweepReport:
    rows: list[SweepRow]
    meta: dict = field(default_factory=dict)

    def losses(self) -> dict[float, float]:
        return {r.target_compression: r.val_loss for r in self.rows}

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(SWEEP_HEADER)
            for r in self.rows:
                w.writerow([f"{getattr(r, k):.6g}" for k in SWEEP_HEADER])
        return path

    def write_json(self, path: str | Path) -> Path:
        path = Path(path)
        payload = {"meta": self.meta, "rows": [dataclasses.asdict(r) for r in self.rows]}
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return path

    def format_table(self) -> str:
        lines = [f"{'compression':>12} {'achieved':>9} {'prune_rate':>10} {'pre-ft loss':>11} "
                 f"{'loss':>8} {'model sparsity':>14}"]
        for r in self.rows:
            lines.append(f"{r.target_compression:>12.2f} {r.achieved_compression:>9.4f} {r.prune_rate:>10.4f} "
                         f"{r.pre_finetune_loss:>11.4f} {r.val_loss:>8.4f} {r.model_sparsity:>14.4f}")
        if self.rows:
            lines.append(f"baseline val loss (no pruning): {self.rows[0].baseline_val_loss:.4f}")
        return "\n".join(lines)


def _sweep_one(args) -> SweepRow:
    params_arrays, shadow, tracker_step, mcfg, tcfg, train_ids, val_ids, target, baseline = args
    with T.default_dtype(np.float32):
        params = M.build_model(mcfg)
    params.load_arrays(params_arrays)
    tracker = TrackerState({k: shadow[k] for k in params.names()}, tracker_step)
    if target == 0:
        # Nothing is pruned, so the unpruned Step-I model is the row.
        return SweepRow(0.0, 0.0, 0.0, baseline, baseline, baseline, model_sparsity(params))
    res = prune_and_finetune(params, tracker, tcfg, mcfg, train_ids, val_ids, target=target)
    return SweepRow(float(target), res.mask.achieved_compression, res.mask.prune_rate, res.val_loss,
                    baseline, res.pre_finetune_loss, model_sparsity(res.params))


def sweep(targets: Sequence[float], trainer: Trainer, *, jobs: int = 1,
          meta: Optional[dict] = None) -> SweepReport:
    """Prune+fine-tune independently at every target, all from the same trained state."""
    targets = sorted({float(t) for t in targets} | {0.0})
    for t in targets:
        if not 0.0 <= t < 1.0:
            raise ValueError(f"sweep targets must lie in [0, 1), got {t}")
    if trainer.tracker is None or trainer.tracker.step == 0:
        raise ValueError("sweep needs a trained model with a populated tracker")
    baseline = trainer.evaluate()
    params_arrays = {k: v.copy() for k, v in trainer.params.arrays().items()}
    shadow = {k: v.copy() for k, v in trainer.tracker.shadow.items()}
    jobs_args = [(params_arrays, shadow, trainer.tracker.step, trainer.mcfg, trainer.tcfg,
                  trainer.train_ids, trainer.val_ids, t, baseline) for t in targets]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_one, jobs_args))
    else:
        rows = [_sweep_one(a) for a in jobs_args]
    for r in rows:
        log.info("target %.2f achieved %.4f loss %.4f", r.target_compression, r.achieved_compression, r.val_loss)
    rows.sort(key=lambda r: r.target_compression)
    info = {"seed": trainer.tcfg.seed, "config_hash": config_hash(trainer.mcfg, trainer.tcfg),
            "trained_steps": trainer.step}
    info.update(meta or {})
    return SweepReport(rows, info)
