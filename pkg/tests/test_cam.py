import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgemga.cam import binarize, compute_cam, compute_cams, read_pgm, upsample_bilinear, write_pgm
from edgemga.models import CamCompatibilityError, ConvNetClassifier, Layer, ModelSpec

from conftest import tiny_model

PASS_THROUGH = ModelSpec(
    name="pass-through",
    input_shape=(2, 2, 2),
    n_classes=2,
    layers=(Layer("conv", 2, kernel=1), Layer("gap"), Layer("dense", 2)),
)


def hand_model(weights):
    """Identity 1x1 conv, so the CAM activations are the input channels."""
    m = ConvNetClassifier(spec=PASS_THROUGH).initialize()
    m.params_["conv0.weight"] = np.eye(2, dtype=np.float32).reshape(2, 2, 1, 1)
    m.params_["dense.weight"] = np.asarray(weights, np.float32)
    return m


A = np.array([[[1, 0], [0, 0]], [[0, 0], [0, 1]]], np.float32)


def test_hand_built_cam():
    m = hand_model([[1, 2], [0, 0]])
    np.testing.assert_allclose(compute_cam(m, A, 0).values, [[0.5, 0], [0, 1]])


def test_zero_class_weights_give_zero_map():
    m = hand_model([[1, 2], [0, 0]])
    np.testing.assert_array_equal(compute_cam(m, A, 1).values, np.zeros((2, 2)))


def test_cam_deterministic(tiny, rng):
    x = rng.uniform(size=(1, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(compute_cam(tiny, x, 1).values, compute_cam(tiny, x, 1).values)


def test_cam_in_unit_range_and_input_sized(tiny, rng):
    X = rng.uniform(size=(5, 1, 8, 8)).astype(np.float32)
    maps = compute_cams(tiny, X, [0, 1, 2, 0, 1])
    assert maps.shape == (5, 8, 8)
    assert maps.min() >= 0 and maps.max() <= 1
    for mp in maps:
        assert mp.max() == 0 or np.isclose(mp.max(), 1)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.01, 100))
def test_cam_scale_covariance(s):
    m = tiny_model(3)
    x = np.random.default_rng(0).uniform(size=(1, 8, 8)).astype(np.float32)
    base = compute_cam(m, x, 2).values
    m.params_["dense.weight"] = m.params_["dense.weight"].copy()
    m.params_["dense.weight"][2] *= np.float32(s)
    np.testing.assert_allclose(compute_cam(m, x, 2).values, base, atol=1e-6)


def test_bad_class_index(tiny):
    with pytest.raises(IndexError):
        compute_cam(tiny, np.zeros((1, 8, 8), np.float32), 3)


def test_dense_before_gap_rejected():
    spec = ModelSpec("bad", (1, 4, 4), 2, (Layer("conv", 2), Layer("dense", 2), Layer("gap")))
    with pytest.raises(CamCompatibilityError):
        ConvNetClassifier(spec=spec).initialize()


def test_binarize_examples():
    m = np.array([[0.5, 0], [0, 1]])
    np.testing.assert_array_equal(binarize(m, 0.6), [[0, 0], [0, 1]])
    np.testing.assert_array_equal(binarize(m, 0.0), np.ones((2, 2)))
    np.testing.assert_array_equal(binarize(m, 1.0), [[0, 0], [0, 1]])
    with pytest.raises(ValueError):
        binarize(m, 1.0001)


def test_upsample_examples():
    np.testing.assert_allclose(upsample_bilinear(np.array([[0.0, 1.0]]), (1, 4)), [[0, 1 / 3, 2 / 3, 1]])
    np.testing.assert_allclose(upsample_bilinear(np.full((3, 2), 0.7), (9, 5)), np.full((9, 5), 0.7))
    m = np.random.default_rng(0).uniform(size=(4, 5))
    np.testing.assert_allclose(upsample_bilinear(m, (4, 5)), m)


def test_pgm_round_trip(tmp_path):
    m = np.arange(12).reshape(3, 4) / 255.0
    m[0, 0] = 10 / 255  # newline byte in the payload
    write_pgm(tmp_path / "m.pgm", m)
    np.testing.assert_allclose(read_pgm(tmp_path / "m.pgm"), m)
