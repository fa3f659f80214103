import threading

import numpy as np
import pytest
from sklearn.base import clone

from edgemga.checkpoint import CheckpointError, SpecMismatchError, load_checkpoint, save_checkpoint
from edgemga.models import (
    SPECS,
    ConvNetClassifier,
    Layer,
    ModelSpec,
    QueryBudgetExhausted,
    QueryOracle,
    build_model,
    oracle_query,
    predict,
    query_many,
    train,
)

from conftest import TINY_SPEC, tiny_model


def test_same_seed_same_parameters():
    a, b = build_model(TINY_SPEC, 5), build_model(TINY_SPEC, 5)
    for k in a.params_:
        np.testing.assert_array_equal(a.params_[k], b.params_[k])
    c = build_model(TINY_SPEC, 6)
    assert any(not np.array_equal(a.params_[k], c.params_[k]) for k in a.params_)


def test_builtin_specs_are_cam_compatible():
    for spec in SPECS.values():
        spec.validate()
        assert spec.layers[-2].kind == "gap"


def test_predict_is_a_distribution(tiny, rng):
    X = rng.uniform(size=(7, 1, 8, 8)).astype(np.float32)
    p = tiny.predict_proba(X)
    np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-6)
    np.testing.assert_array_equal(p, tiny.predict_proba(X))
    assert predict(tiny, X[0]).shape == (3,)


def test_predict_is_thread_safe(tiny, rng):
    X = rng.uniform(size=(16, 1, 8, 8)).astype(np.float32)
    ref = tiny.predict_proba(X)
    outs = [None] * 4

    def work(i):
        outs[i] = tiny.predict_proba(X)

    threads = [threading.Thread(target=work, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for o in outs:
        np.testing.assert_array_equal(o, ref)


def test_bad_shape_rejected(tiny):
    with pytest.raises(ValueError):
        tiny.predict(np.zeros((2, 1, 9, 9)))


def test_zero_epochs_leaves_parameters(rng):
    m = tiny_model(1)
    before = {k: v.copy() for k, v in m.params_.items()}
    X = rng.uniform(size=(20, 1, 8, 8)).astype(np.float32)
    y = rng.integers(0, 3, 20)
    train(m, X, y, epochs=0, lr=0.1, batch=8, seed=1)
    for k in before:
        np.testing.assert_array_equal(m.params_[k], before[k])


def test_training_is_deterministic(rng):
    X = rng.uniform(size=(30, 1, 8, 8)).astype(np.float32)
    y = rng.integers(0, 3, 30)
    a = ConvNetClassifier(TINY_SPEC, epochs=2, random_state=4).fit(X, y)
    b = clone(a).fit(X, y)
    for k in a.params_:
        np.testing.assert_array_equal(a.params_[k], b.params_[k])


def test_memorizes_fifty_samples():
    rng = np.random.default_rng(0)
    X = rng.uniform(size=(50, 1, 8, 8)).astype(np.float32)
    y = rng.integers(0, 3, 50)
    layers = (Layer("conv", 3), Layer("relu"), Layer("maxpool", 2), Layer("conv", 32), Layer("relu"), Layer("gap"), Layer("dense", 3))
    spec = ModelSpec("wide", (1, 8, 8), 3, layers)
    m = ConvNetClassifier(spec, epochs=300, learning_rate=0.02, batch_size=10, validation_fraction=0, random_state=0)
    m.fit(X, y)
    assert m.train_accuracy_ == 1.0


def test_untrained_model_is_at_chance():
    m = build_model("target", 0)
    rng = np.random.default_rng(0)
    X = rng.uniform(size=(1000, 1, 28, 28)).astype(np.float32)
    y = rng.integers(0, 10, 1000)
    assert abs(np.mean(m.predict(X) == y) - 0.1) <= 0.03


def test_oracle_counts_and_caps(tiny):
    x = np.zeros((1, 8, 8), np.float32)
    o = QueryOracle(tiny, cap=5)
    for _ in range(3):
        oracle_query(o, x)
    assert o.count == 3
    oracle_query(o, x)
    oracle_query(o, x)
    with pytest.raises(QueryBudgetExhausted):
        oracle_query(o, x)
    assert o.count == 5


def test_query_many_is_all_or_nothing(tiny):
    X = np.zeros((2, 1, 8, 8), np.float32)
    full, fresh = QueryOracle(tiny, cap=1, count=1), QueryOracle(tiny, cap=3)
    with pytest.raises(QueryBudgetExhausted):
        query_many([fresh, full], X)
    assert fresh.count == 0 and full.count == 1
    p = query_many([fresh, QueryOracle(tiny, cap=3)], X)
    np.testing.assert_array_equal(p, tiny.predict_proba(X))


def test_concurrent_queries_are_counted_once(tiny):
    o = QueryOracle(tiny, cap=1000)
    x = np.zeros((1, 8, 8), np.float32)
    threads = [threading.Thread(target=lambda: [o.query(x) for _ in range(25)]) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert o.count == 100


def test_checkpoint_round_trip(tmp_path, tiny, rng):
    tiny.epochs_trained_, tiny.validation_accuracy_, tiny.train_accuracy_ = 0, 0.5, 0.5
    path = save_checkpoint(tiny, tmp_path / "m.aebm")
    back = load_checkpoint(path)
    X = rng.uniform(size=(4, 1, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(back.predict_proba(X), tiny.predict_proba(X))
    assert back.spec_ == TINY_SPEC


def test_checkpoint_truncated(tmp_path, tiny):
    tiny.epochs_trained_, tiny.validation_accuracy_, tiny.train_accuracy_ = 0, 0.5, 0.5
    path = save_checkpoint(tiny, tmp_path / "m.aebm")
    raw = path.read_bytes()
    path.write_bytes(raw[:-7])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_spec_mismatch(tmp_path):
    m = build_model("source", 0)
    m.validation_accuracy_ = m.train_accuracy_ = 0.1
    path = save_checkpoint(m, tmp_path / "s.aebm")
    load_checkpoint(path, expected_spec="source")
    with pytest.raises(SpecMismatchError):
        load_checkpoint(path, expected_spec="target")


def test_sklearn_params_round_trip():
    m = ConvNetClassifier("target", epochs=3)
    assert m.get_params()["epochs"] == 3
    assert clone(m).get_params() == m.get_params()
