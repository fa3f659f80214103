import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from edgemga import autodiff as ad
from edgemga.advedge import (
    SOBEL_X,
    SOBEL_Y,
    AdvEdgeAttack,
    AttackConfig,
    EdgeMask,
    adv_loss,
    advedge_step,
    edge_mask,
    run_advedge,
    sobel_edges,
)
from edgemga.cam import compute_cams

from conftest import tiny_model

EPS = 8 / 255


def test_constant_image_has_no_edges():
    e = sobel_edges(np.full((1, 6, 6), 0.4))
    assert not e.d.any()


def test_vertical_step_response():
    img = np.zeros((6, 6))
    img[:, 3:] = 1.0
    e = sobel_edges(img[None])
    # columns either side of the step see the full kernel column sum
    np.testing.assert_allclose(e.d_h[1:-1, 2], 4.0)
    np.testing.assert_allclose(e.d_h[1:-1, 3], 4.0)
    np.testing.assert_array_equal(e.d_v, 0)
    np.testing.assert_array_equal(e.d_h[:, [0, 1, 4, 5]], 0)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (5, 7), elements=st.floats(0, 1)))
def test_sobel_matches_direct_correlation(img):
    p = np.pad(img, 1, mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(p, (3, 3))
    e = sobel_edges(img[None])
    np.testing.assert_allclose(e.d_h, np.einsum("hwij,ij->hw", win, SOBEL_X), atol=1e-12)
    np.testing.assert_allclose(e.d_v, np.einsum("hwij,ij->hw", win, SOBEL_Y), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (5, 7), elements=st.floats(0, 1)))
def test_sobel_mirror_symmetry(img):
    d = sobel_edges(img[None]).d
    np.testing.assert_allclose(sobel_edges(img[None, :, ::-1]).d, d[:, ::-1], atol=1e-12)


def test_edge_mask_examples():
    d = np.array([[0.0, 1.0], [1.0, 0.0]])
    edges = EdgeMask(d, np.zeros_like(d), d)
    m = np.array([[0.9, 0.1], [0.5, 0.3]])
    np.testing.assert_array_equal(edge_mask(edges, m, 0.3).n_w, [[0, 0], [1, 0]])
    np.testing.assert_array_equal(edge_mask(edges, np.ones((2, 2)), 0.3).n_w, d)
    np.testing.assert_array_equal(edge_mask(edges, np.zeros((2, 2)), 0.3).n_w, 0)
    with pytest.raises(ValueError):
        edge_mask(edges, np.ones((3, 3)), 0.3)


def test_step_null_cases(rng):
    x = rng.uniform(size=(1, 5, 5))
    x_hat = np.clip(x + rng.uniform(-EPS, EPS, x.shape), 0, 1)
    g = rng.normal(size=x.shape)
    np.testing.assert_array_equal(advedge_step(x_hat, g, 1 / 255, np.zeros((5, 5)), x, EPS), x_hat)
    np.testing.assert_array_equal(advedge_step(x_hat, g, 0.0, np.ones((5, 5)), x, EPS), x_hat)


def test_step_projects_onto_ball():
    x = np.full((1, 3, 3), 0.5)
    x_hat = x.copy()
    x_hat[0, 1, 1] += 10 * EPS
    out = advedge_step(x_hat, np.zeros_like(x), 1 / 255, np.ones((3, 3)), x, EPS)
    assert out[0, 1, 1] == pytest.approx(0.5 + EPS)


def test_step_keeps_box():
    x = np.full((1, 2, 2), 0.01)
    out = advedge_step(x, np.ones_like(x), EPS, np.ones((2, 2)), x, EPS)
    assert out.min() >= 0


def test_loss_interpretation_term_vanishes_at_x(tiny, rng):
    x = rng.uniform(size=(1, 8, 8)).astype(np.float64)
    m = compute_cams(tiny, x[None], [1])[0]
    full, _ = adv_loss(tiny, x, 1, m, 0.204)
    pure, _ = adv_loss(tiny, x, 1, m, 0.0)
    assert full == pytest.approx(pure, abs=1e-12)


@pytest.mark.parametrize("lam", [0.0, 0.204, 3.0])
def test_loss_gradient_matches_finite_differences(lam):
    rng = np.random.default_rng(int(lam * 10))
    model = tiny_model(2)
    x = rng.uniform(0.2, 0.8, size=(1, 8, 8))
    m = rng.uniform(size=(8, 8))
    _, g = adv_loss(model, x, 0, m, lam)

    def fn(t):
        return adv_loss(model, t.data, 0, m, lam)[0]

    num = ad.finite_difference_gradient(fn, ad.Tensor(x, np.float64), h=1e-6)
    assert np.abs(g - num).max() / np.abs(num).max() < 1e-3


def test_zero_iterations_is_identity(tiny, rng):
    x = rng.uniform(size=(1, 8, 8)).astype(np.float32)
    y = int(tiny.predict(x))
    seed = run_advedge(tiny, x, y, AttackConfig(iterations=0))
    assert not seed.delta.any()
    assert seed.success is False


def test_seed_stays_on_mask_support(rng):
    model = tiny_model(4)
    X = rng.uniform(size=(6, 1, 8, 8)).astype(np.float32)
    y = model.predict(X)
    for s in AdvEdgeAttack(model, iterations=20, alpha=2 / 255).generate(X, y):
        assert np.abs(s.delta).max() <= EPS + 1e-7
        off = s.n_w[None] == 0
        np.testing.assert_array_equal(s.delta[off], 0)
        assert s.x_adv.min() >= 0 and s.x_adv.max() <= 1


def test_unmasked_zero_lambda_is_plain_pgd(rng):
    model = tiny_model(5)
    X = rng.uniform(size=(3, 1, 8, 8)).astype(np.float32)
    y = model.predict(X)
    seeds = AdvEdgeAttack(model, iterations=10, lam=0.0, masked=False).generate(X, y)
    x_hat = X.copy()
    for _ in range(10):
        with ad.Tape() as tape:
            xt = ad.Tensor(x_hat)
            logits, _ = model.forward(xt)
            loss = ad.tensor_sum(ad.pick(ad.log_softmax(logits), y))
        g = tape.gradient(loss, xt)
        x_hat = np.clip(np.clip(x_hat - np.float32(1 / 255) * np.sign(g), X - np.float32(EPS), X + np.float32(EPS)), 0, 1)
    np.testing.assert_array_equal(np.stack([s.x_adv for s in seeds]), x_hat)


def test_batched_equals_single(rng):
    model = tiny_model(6)
    X = rng.uniform(size=(4, 1, 8, 8)).astype(np.float32)
    y = model.predict(X)
    batch = AdvEdgeAttack(model, iterations=5).generate(X, y)
    for i in range(4):
        solo = run_advedge(model, X[i], int(y[i]), AttackConfig(iterations=5))
        np.testing.assert_allclose(solo.delta, batch[i].delta, atol=1e-6)


def test_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(epsilon=0)
    with pytest.raises(ValueError):
        AttackConfig(tau=1.5)
