import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from traceprune.errors import AlignmentError, EmptyTrackerError, HorizonError
from traceprune.model import ModelConfig, build_model
from traceprune.tracker import (ImportanceVector, TraceRecorder, export_traces, importance_from_history,
                                TrackerState, importance_scores, init_tracker, read_traces, triangular,
                                update_tracker)

SMALL = ModelConfig(embed_dim=8, n_heads=2, n_blocks=1, ffn_dim=12, context_len=4, vocab_size=5)


def brute_force(history):
    """sum_j j * p_j / sum_j j, written out directly over the whole history."""
    h = np.asarray(history, dtype=np.float64)
    w = np.arange(1, len(h) + 1, dtype=np.float64)
    return np.tensordot(w, h, axes=1) / w.sum()



def feed(values):
    """Tracker over a single tensor 'w' fed the given sequence."""
    first = np.asarray(values[0], dtype=np.float64)
    s = TrackerState({"w": np.zeros(first.shape)}, 0)
    for v in values:
        update_tracker(s, {"w": np.asarray(v, dtype=np.float32)})
    return s


finite = st.floats(-100, 100, allow_nan=False, width=32)


# --- init and update ----------------------------------------------------------------

def test_init_matches_model():
    model = build_model(SMALL)
    s = init_tracker(model)
    assert s.step == 0 and s.weight_sum == 0
    assert s.shapes() == model.shapes()
    assert all(np.all(q == 0) and q.dtype == np.float64 for q in s.shadow.values())


def test_two_updates_example():
    s = feed([[4.0], [6.0]])
    assert s.step == 2 and s.weight_sum == 3
    assert abs(s.shadow["w"][0] - 16 / 3) < 1e-9


def test_constant_weight():
    s = feed([[2.5]] * 10)
    assert abs(s.shadow["w"][0] - 2.5) < 1e-12


def test_long_run_matches_brute_force():
    rng = np.random.default_rng(0)
    hist = rng.standard_normal((100, 1000)).astype(np.float32)
    s = feed(list(hist))
    assert np.abs(s.shadow["w"] - brute_force(hist)).max() < 1e-5


def test_update_checks_alignment():
    s = init_tracker(build_model(SMALL))
    with pytest.raises(AlignmentError):
        update_tracker(s, {"tok_emb": np.zeros((5, 8))})
    bad = build_model(SMALL).arrays()
    bad["tok_emb"] = np.zeros((5, 9))
    with pytest.raises(AlignmentError):
        update_tracker(s, bad)


def test_update_from_model_store():
    model = build_model(SMALL)
    s = update_tracker(init_tracker(model), model)
    for name, q in s.shadow.items():
        np.testing.assert_array_equal(q, model[name].data.astype(np.float64))


def test_triangular():
    assert [triangular(n) for n in range(5)] == [0, 1, 3, 6, 10]


# --- one-shot importance ----------------------------------------------------------------

def test_history_constant():
    assert importance_from_history([5.0, 5.0, 5.0], 3, 2) == pytest.approx(5.0)


def test_history_lookback_example():
    # (4*1 + 6*2 + 3*3) / 6
    assert importance_from_history([4.0, 6.0, 3.0], 3, 2) == pytest.approx(25 / 6)


def test_history_short_lookback():
    # k=0 uses only the last value
    assert importance_from_history([4.0, 6.0, 3.0], 3, 0) == pytest.approx(3.0)
    # k=1: (6*2 + 3*3) / 5
    assert importance_from_history([4.0, 6.0, 3.0], 3, 1) == pytest.approx(21 / 5)


def test_history_bad_horizon():
    with pytest.raises(HorizonError):
        importance_from_history([1.0, 2.0, 3.0], 3, 3)
    with pytest.raises(HorizonError):
        importance_from_history([1.0, 2.0], 3, 1)
    with pytest.raises(HorizonError):
        importance_from_history([1.0, 2.0, 3.0], 3, -1)


def test_history_vectorised():
    h = np.random.default_rng(1).standard_normal((7, 3, 2))
    out = importance_from_history(h)
    assert out.shape == (3, 2)
    np.testing.assert_allclose(out, brute_force(h), atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float32, st.tuples(st.integers(1, 40), st.integers(1, 5)), elements=finite))
def test_running_equals_one_shot(hist):
    s = feed(list(hist))
    np.testing.assert_allclose(s.shadow["w"], importance_from_history(hist), rtol=1e-9, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float32, st.tuples(st.integers(1, 40), st.integers(1, 5)), elements=finite))
def test_average_stays_within_history_range(hist):
    q = feed(list(hist)).shadow["w"]
    lo, hi = hist.min(axis=0).astype(np.float64), hist.max(axis=0).astype(np.float64)
    assert np.all(q >= lo - 1e-9 * (1 + np.abs(lo))) and np.all(q <= hi + 1e-9 * (1 + np.abs(hi)))


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 30), st.floats(-10, 10), st.floats(0.01, 10))
def test_recent_values_weigh_more(n, base, bump):
    # The same bump applied at a later epoch must move the average further.
    effects = []
    for e in range(n):
        h = np.full(n, base)
        h[e] += bump
        effects.append(importance_from_history(h) - base)
    assert all(b > a for a, b in zip(effects, effects[1:]))


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float32, st.tuples(st.integers(2, 30), st.just(3)), elements=finite), st.data())
def test_resume_equals_uninterrupted(hist, data):
    cut = data.draw(st.integers(1, len(hist) - 1))
    full = feed(list(hist))
    part = feed(list(hist[:cut])).copy()
    for v in hist[cut:]:
        update_tracker(part, {"w": v})
    assert part.step == full.step
    np.testing.assert_array_equal(part.shadow["w"], full.shadow["w"])


# --- scores ------------------------------------------------------------------------

def test_scores_are_absolute():
    s = feed([[-3.0, 0.0, 2.0]])
    np.testing.assert_array_equal(importance_scores(s).scores, [3.0, 0.0, 2.0])


def test_scores_of_zero_weights():
    s = feed([np.zeros((2, 3))] * 4)
    assert np.all(importance_scores(s).scores == 0)


def test_scores_need_updates():
    with pytest.raises(EmptyTrackerError):
        importance_scores(init_tracker(build_model(SMALL)))


def test_scores_follow_permutation():
    rng = np.random.default_rng(2)
    x = rng.standard_normal(50)
    perm = rng.permutation(50)
    a = importance_scores(feed([x])).scores
    b = importance_scores(feed([x[perm]])).scores
    np.testing.assert_array_equal(b, a[perm])


def test_scores_select_prunable_and_split():
    model = build_model(SMALL)
    s = update_tracker(init_tracker(model), model)
    vec = importance_scores(s, model.prunable_names())
    assert list(vec.names) == model.prunable_names()
    assert len(vec) == sum(model[n].size for n in model.prunable_names())
    for name, arr in vec.split().items():
        np.testing.assert_array_equal(arr, np.abs(model[name].data.astype(np.float64)))
    with pytest.raises(KeyError):
        importance_scores(s, ["nope"])


def test_importance_vector_offsets():
    vec = ImportanceVector.from_arrays({"a": np.ones((2, 2)), "b": np.zeros(3)})
    assert vec.offsets == [0, 4, 7]
    assert vec.split()["b"].shape == (3,)


# --- traces --------------------------------------------------------------------------

def test_export_small(tmp_path):
    out = export_traces({"a": [1.0, 2.0, 3.0], "b": [0.5, -0.25, 0.125]}, tmp_path / "t.csv")
    lines = out.read_text().splitlines()
    assert lines[0] == "weight_id,epoch,value" and len(lines) == 7
    assert lines[1] == "a,1,1.0"


def test_export_round_trip_exact(tmp_path):
    rng = np.random.default_rng(3)
    hist = {f"w{i}": list(rng.standard_normal(100).astype(np.float32)) for i in range(10)}
    path = export_traces(hist, tmp_path / "t.csv")
    assert len(path.read_text().splitlines()) == 1 + 1000
    back = read_traces(path)
    for k, v in hist.items():
        assert np.array_equal(np.asarray(back[k], dtype=np.float32), np.asarray(v, dtype=np.float32))


def test_export_needs_two_epochs(tmp_path):
    with pytest.raises(ValueError):
        export_traces({}, tmp_path / "t.csv")
    with pytest.raises(ValueError):
        export_traces({"a": [1.0]}, tmp_path / "t.csv")


def test_recorder_samples_live_values():
    model = build_model(SMALL)
    rec = TraceRecorder(model, n_samples=10, seed=4)
    assert len(set(rec.samples)) == 10
    rec.record(model)
    for name in model.prunable_names():
        model[name].data += 1.0
    rec.record(model)
    for (name, idx), wid in zip(rec.samples, rec.ids):
        h = rec.histories()[wid]
        assert h[1] == np.float32(model[name].data.reshape(-1)[idx])
        assert h[1] - h[0] == pytest.approx(1.0, abs=1e-6)
    t = rec.table()
    other = TraceRecorder(model, n_samples=10, seed=4)
    other.load_table(t)
    np.testing.assert_array_equal(other.table(), t)
