import math

import numpy as np
import pytest

from traceprune.checkpoint import decode, encode, load_checkpoint, save_checkpoint
from traceprune.errors import CheckpointFormatError, TrainingDivergence
from traceprune.harness import (LossLog, TrainConfig, Trainer, load_corpus, prune_and_finetune, sample_batch,
                                sweep, train)
from traceprune.model import ModelConfig, build_model, build_vocab

MC = ModelConfig(embed_dim=16, n_heads=2, n_blocks=1, ffn_dim=32, context_len=16)
TC = TrainConfig(steps=20, batch_size=8, eval_batches=2, eval_interval=0, finetune_steps=5, trace_samples=8)


@pytest.fixture(scope="module")
def corpus(small_corpus):
    return load_corpus(small_corpus)


@pytest.fixture(scope="module")
def trained(corpus):
    return train(TC, MC, corpus)


def same_state(a: Trainer, b: Trainer, val_entries: bool = True):
    ta, ma = a.state()
    tb, mb = b.state()
    assert list(ta) == list(tb)
    for k in ta:
        assert ta[k].tobytes() == tb[k].tobytes(), k
    if not val_entries:
        la, lb = ma.pop("loss_log"), mb.pop("loss_log")
        assert [r[:2] for r in la] == [r[:2] for r in lb]
    assert ma == mb


# --- corpus --------------------------------------------------------------------------

def test_split_of_hundred_chars(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("abcdefghij" * 10)
    vocab, tr, va = load_corpus(p)
    assert (len(tr), len(va)) == (90, 10)
    assert vocab.decode(np.concatenate([tr, va])) == "abcdefghij" * 10


def test_split_is_deterministic(small_corpus):
    a, b = load_corpus(small_corpus), load_corpus(small_corpus)
    assert a[0] == b[0]
    assert np.array_equal(a[1], b[1]) and np.array_equal(a[2], b[2])


def test_full_corpus_conserved(corpus_path):
    text = corpus_path.read_text(encoding="utf-8")
    vocab, tr, va = load_corpus(corpus_path)
    assert len(tr) + len(va) == len(text)
    assert len(tr) == int(0.9 * len(text))
    assert len(vocab) == len(build_vocab(text))


def test_corpus_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_corpus(tmp_path / "nope.txt")
    (tmp_path / "e.txt").write_text("")
    with pytest.raises(ValueError):
        load_corpus(tmp_path / "e.txt")


def test_batches_are_shifted_windows(corpus):
    ids = corpus[1]
    x, y = sample_batch(ids, 4, 16, np.random.default_rng(0))
    assert x.shape == y.shape == (4, 16)
    np.testing.assert_array_equal(x[:, 1:], y[:, :-1])


# --- training -------------------------------------------------------------------------

def test_zero_steps(corpus):
    res = train(TrainConfig(steps=0, batch_size=8, eval_batches=2), MC, corpus)
    fresh = build_model(ModelConfig(**{**MC.to_dict(), "vocab_size": len(corpus[0])}))
    for k, v in res.params.arrays().items():
        assert v.tobytes() == fresh[k].data.tobytes()
    assert res.tracker.step == 0


def test_initial_loss_near_uniform(corpus):
    res = train(TrainConfig(steps=1, batch_size=8, eval_batches=2), MC, corpus)
    first = res.log.train_losses[0]
    assert abs(first - math.log(len(corpus[0]))) < 0.05 * math.log(len(corpus[0]))


def test_loss_decreases(trained, corpus):
    assert trained.baseline_val_loss < math.log(len(corpus[0]))
    assert trained.tracker.step == TC.steps
    assert len(trained.log.train_losses) == TC.steps


def test_training_is_deterministic(corpus, trained):
    again = train(TC, MC, corpus)
    same_state(trained.trainer, again.trainer)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(corpus):
    mcfg = ModelConfig(**{**MC.to_dict(), "vocab_size": len(corpus[0])})
    params = build_model(mcfg)
    params["head.bias"].data[0] = np.inf
    tr = Trainer(params, mcfg, TC, corpus[1], corpus[2])
    with pytest.raises(TrainingDivergence) as exc:
        tr.train_step()
    assert exc.value.step == 1 and not math.isfinite(exc.value.loss)


def test_loss_log_csv(tmp_path):
    log = LossLog()
    log.append(1, 4.0)
    log.append(2, 3.5)
    log.set_val(2, 3.75)
    text = (log.write_csv(tmp_path / "l.csv")).read_text().splitlines()
    assert text == ["step,train_loss,val_loss", "1,4.0,", "2,3.5,3.75"]
    assert np.allclose(log.smoothed(2), [3.75])  # moving average over full windows only


# --- checkpoints ----------------------------------------------------------------------

def test_checkpoint_round_trip_bytes(tmp_path, trained):
    a = trained.trainer.save(tmp_path / "a.ckpt")
    ck = load_checkpoint(a)
    b = save_checkpoint(tmp_path / "b.ckpt", ck.tensors, ck.meta)
    assert a.read_bytes() == b.read_bytes()


def test_checkpoint_dtypes_round_trip():
    tensors = {"f": np.arange(6, dtype=np.float32).reshape(2, 3), "d": np.array([0.1, -2.5]),
               "b": np.array([[True, False, True], [False, False, True], [True, True, True]]),
               "i": np.array([-3, 7], dtype=np.int64), "s": np.float32(2.0).reshape(())}
    back = decode(encode(tensors, {"x": [1, 2]}))
    assert back.meta == {"x": [1, 2]}
    for k, v in tensors.items():
        assert back.tensors[k].dtype == v.dtype and np.array_equal(back.tensors[k], v)


def test_checkpoint_truncated(tmp_path, trained):
    data = trained.trainer.save(tmp_path / "a.ckpt").read_bytes()
    for cut in (0, 3, 11, len(data) // 2, len(data) - 1):
        with pytest.raises(CheckpointFormatError):
            decode(data[:cut])
    with pytest.raises(CheckpointFormatError):
        decode(data + b"\0")


def test_checkpoint_bad_header(trained):
    data = encode({"a": np.zeros(2, dtype=np.float32)}, {})
    with pytest.raises(CheckpointFormatError):
        decode(b"XXXX" + data[4:])
    with pytest.raises(CheckpointFormatError):
        decode(data[:4] + (2).to_bytes(4, "little") + data[8:])


def test_checkpoint_write_is_atomic(tmp_path):
    p = save_checkpoint(tmp_path / "c.ckpt", {"a": np.ones(3, dtype=np.float32)}, {"v": 1})
    assert not (tmp_path / "c.ckpt.tmp").exists()
    save_checkpoint(p, {"a": np.zeros(3, dtype=np.float32)}, {"v": 2})
    assert load_checkpoint(p).meta == {"v": 2}


def test_resume_matches_uninterrupted(tmp_path, corpus):
    _, tr_ids, va_ids = corpus
    straight = train(TC, MC, corpus).trainer
    first = train(TrainConfig(**{**TC.to_dict(), "steps": 10}), MC, corpus).trainer
    first.save(tmp_path / "half.ckpt")
    resumed = Trainer.from_checkpoint(tmp_path / "half.ckpt", tr_ids, va_ids)
    resumed.run(10)
    # configs differ only in the requested step count; the split run also logged a val loss at step 10
    resumed.tcfg = straight.tcfg
    same_state(straight, resumed, val_entries=False)


# --- pruning and the sweep ---------------------------------------------------------------

def test_prune_target_zero_changes_nothing(trained, corpus):
    res = prune_and_finetune(trained.params, trained.tracker, TC, trained.trainer.mcfg, corpus[1], corpus[2],
                             target=0.0, finetune_steps=0)
    assert res.mask.n_pruned == 0
    assert res.pre_finetune_loss == trained.trainer.evaluate()


def test_prune_keeps_input_and_mask(trained, corpus):
    before = {k: v.copy() for k, v in trained.params.arrays().items()}
    res = prune_and_finetune(trained.params, trained.tracker, TC, trained.trainer.mcfg, corpus[1], corpus[2],
                             target=0.6)
    for k, v in trained.params.arrays().items():
        assert v.tobytes() == before[k].tobytes()
    assert 0.599 <= res.mask.achieved_compression <= 0.601
    for name, keep in res.mask.masks.items():
        assert np.all(res.params[name].data[~keep] == 0.0)
    assert math.isfinite(res.val_loss)


def test_prune_needs_one_selector(trained, corpus):
    with pytest.raises(ValueError):
        prune_and_finetune(trained.params, trained.tracker, TC, trained.trainer.mcfg, corpus[1], corpus[2])


def test_sweep_rows(trained):
    rep = sweep([0.2, 0.6, 0.9], trained.trainer)
    assert [r.target_compression for r in rep.rows] == [0.0, 0.2, 0.6, 0.9]
    base = rep.rows[0]
    assert base.achieved_compression == 0.0 and base.val_loss == base.baseline_val_loss
    for r in rep.rows:
        assert abs(r.achieved_compression - r.target_compression) <= 0.01
        assert r.model_sparsity >= 0.0 and math.isfinite(r.val_loss)


def test_sweep_levels_are_independent(trained):
    both = sweep([0.3, 0.7], trained.trainer).losses()
    alone = sweep([0.7], trained.trainer).losses()
    assert both[0.7] == alone[0.7] and both[0.0] == alone[0.0]


def test_sweep_is_deterministic(tmp_path, trained):
    a = sweep([0.5], trained.trainer).write_csv(tmp_path / "a.csv")
    b = sweep([0.5], trained.trainer).write_csv(tmp_path / "b.csv")
    assert a.read_bytes() == b.read_bytes()


def test_parallel_sweep_matches_serial(trained):
    serial = sweep([0.4, 0.8], trained.trainer)
    parallel = sweep([0.8, 0.4], trained.trainer, jobs=2)
    assert serial.rows == parallel.rows


def test_sweep_leaves_trainer_untouched(trained):
    before, _ = trained.trainer.state()
    before = {k: v.copy() for k, v in before.items()}
    sweep([0.5], trained.trainer)
    after, _ = trained.trainer.state()
    for k in before:
        assert before[k].tobytes() == after[k].tobytes()


def test_sweep_rejects_bad_levels(trained):
    with pytest.raises(ValueError):
        sweep([1.0], trained.trainer)
