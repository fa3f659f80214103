import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from edgemga.metrics import (
    EvaluationRecord,
    NoSuccessError,
    average_queries,
    iou,
    iou_sweep,
    noise_rate,
    records_from_csv,
    records_to_csv,
    success_rate,
    summarize,
    summary_to_csv,
)

EPS = 8 / 255


def rec(success, queries, noise=0.2, image_id="a"):
    return EvaluationRecord(image_id, 0, success, queries, noise, {t: 0.5 for t in (0.1, 0.3, 0.5, 0.7, 0.9)}, 1)


def test_success_rate():
    assert success_rate([rec(True, 1), rec(True, 2)]) == 1.0
    assert success_rate([rec(False, 1), rec(False, 2)]) == 0.0
    with pytest.raises(ValueError):
        success_rate([])


def test_average_queries():
    assert average_queries([rec(True, 7)]) == 7.0
    assert average_queries([rec(True, 100), rec(True, 300), rec(False, 50_000)]) == 200.0
    assert average_queries([rec(True, 100), rec(False, 300)], successful_only=False) == 200.0
    with pytest.raises(NoSuccessError):
        average_queries([rec(False, 10)])


def test_noise_rate_examples():
    x = np.full((1, 4, 4), 0.5)
    assert noise_rate(x, x, EPS) == 0.0
    assert noise_rate(x, x + EPS, EPS) == pytest.approx(1.0)
    half = x.copy()
    half[0, :2] += EPS
    assert noise_rate(x, half, EPS) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        noise_rate(x, x + 2 * EPS, EPS)


def test_noise_rate_detects_any_change():
    x = np.full((1, 4, 4), 0.5)
    y = x.copy()
    y[0, 0, 0] = np.nextafter(0.5, 1)
    assert noise_rate(x, y, EPS) > 0


def test_iou_two_of_six():
    a = np.array([[1, 1, 1], [1, 0, 0], [0, 0, 0]], float)  # 4 pixels
    b = np.array([[1, 0, 0], [1, 1, 1], [0, 0, 0]], float)  # 4 pixels, 2 shared
    assert iou(a, b, 0.5) == pytest.approx(1 / 3, abs=1e-6)


def test_iou_empty_maps():
    assert iou(np.zeros((2, 2)), np.zeros((2, 2)), 0.5) == 1.0


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, (4, 4), elements=st.floats(0, 1)),
    arrays(np.float64, (4, 4), elements=st.floats(0, 1)),
    st.floats(0, 1),
)
def test_iou_symmetric_and_bounded(a, b, t):
    v = iou(a, b, t)
    assert v == iou(b, a, t)
    assert 0.0 <= v <= 1.0


def test_sweep_requires_ascending():
    with pytest.raises(ValueError):
        iou_sweep(np.zeros((2, 2)), np.zeros((2, 2)), [0.5, 0.1])


def test_csv_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    records = [rec(bool(rng.integers(2)), int(rng.integers(1, 1000)), float(rng.uniform()), f"i{k}") for k in range(20)]
    records_to_csv(tmp_path / "p.csv", records)
    back = records_from_csv(tmp_path / "p.csv")
    assert back == records
    s1, s2 = summarize(records, "CAM", "a", "b"), summarize(back, "CAM", "a", "b")
    summary_to_csv(tmp_path / "s1.csv", s1)
    summary_to_csv(tmp_path / "s2.csv", s2)
    assert (tmp_path / "s1.csv").read_bytes() == (tmp_path / "s2.csv").read_bytes()
    assert s1["total_queries"] == sum(r.queries for r in records)


def test_summary_of_nothing():
    s = summarize([])
    assert s["n_images"] == 0 and s["total_queries"] == 0
    assert np.isnan(s["success_rate"])
