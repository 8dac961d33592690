from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.exceptions import NotFittedError

from chunktrain.memory import (MEASURED_7B_PEAKS, CalibrationError, MemoryModel, MemoryModelCoefficients, calibrate,
                               predict_peak, read_measurements)

from oracles import exact_least_squares

K = 1024

# exact rational least-squares solution of the six published rows
BASE = Fraction(2441, 70)
PER_CHUNK_TOKEN = Fraction(421, 143360)
PER_CONTEXT_TOKEN = Fraction(59, 3440640)
MAX_RESIDUAL = Fraction(25, 42)


def test_exact_oracle_is_frozen():
    assert exact_least_squares(MEASURED_7B_PEAKS) == [BASE, PER_CHUNK_TOKEN, PER_CONTEXT_TOKEN]


def test_fit_matches_exact_solution():
    c = calibrate(MEASURED_7B_PEAKS)
    assert c.base == pytest.approx(float(BASE), rel=1e-10)
    assert c.per_chunk_token == pytest.approx(float(PER_CHUNK_TOKEN), rel=1e-10)
    assert c.per_context_token == pytest.approx(float(PER_CONTEXT_TOKEN), rel=1e-8)
    assert c.max_residual == pytest.approx(float(MAX_RESIDUAL), rel=1e-9)
    assert c.max_residual <= 1.0
    assert c.per_context_token > 0
    # about 3 GiB per 1K tokens of activation budget
    assert c.per_chunk_token * K == pytest.approx(3.007, abs=1e-3)


def test_prediction_near_measurement():
    assert predict_peak(calibrate(MEASURED_7B_PEAKS), 2 * K, 1, 32 * K) == pytest.approx(41.6, abs=1.0)


def test_three_points_interpolate_exactly():
    rows = [(1000, 1, 100, 5.0), (2000, 1, 100, 6.0), (1000, 1, 300, 7.0)]
    c = calibrate(rows)
    assert c.max_residual == pytest.approx(0.0, abs=1e-12)
    assert c.per_chunk_token == pytest.approx(0.001)
    assert c.per_context_token == pytest.approx(0.01)


def test_identical_points_rejected():
    with pytest.raises(CalibrationError, match="activation budget"):
        calibrate([(2048, 1, 1000, 40.0)] * 4)


def test_missing_context_variation_named():
    with pytest.raises(CalibrationError, match="context length"):
        calibrate([(2048, 1, 1000, 40.0), (4096, 1, 1000, 45.0), (8192, 1, 1000, 50.0)])


def test_collinear_variation_rejected():
    # budget and context move together, so their effects cannot be separated
    rows = [(1000, 1, 1000, 1.0), (2000, 1, 2000, 2.0), (3000, 1, 3000, 3.0)]
    with pytest.raises(CalibrationError, match="independent"):
        calibrate(rows)


def test_too_few_rows():
    with pytest.raises(CalibrationError):
        calibrate(MEASURED_7B_PEAKS[:2])


def test_arithmetic_prediction():
    c = MemoryModelCoefficients(10.0, 0.001, 0.0)
    assert predict_peak(c, 8 * K, 2, 123456) == pytest.approx(26.384)
    assert predict_peak(c, 0, 3, 0) == 10.0


def test_negative_coefficients_rejected():
    with pytest.raises(ValueError):
        MemoryModelCoefficients(-1.0, 0.0, 0.0)


@given(cs=st.integers(1, 1 << 16), k=st.integers(1, 16), ctx=st.integers(0, 1 << 19))
def test_prediction_is_affine(cs, k, ctx):
    c = calibrate(MEASURED_7B_PEAKS)
    double = predict_peak(c, 2 * cs, k, ctx) - predict_peak(c, cs, k, ctx)
    assert double == pytest.approx(c.per_chunk_token * k * cs, rel=1e-9, abs=1e-9)
    assert predict_peak(c, cs, k, ctx + 1) >= predict_peak(c, cs, k, ctx)


def test_gqa_ratio_scales_context_term():
    full = calibrate(MEASURED_7B_PEAKS, gqa_ratio=1.0)
    grouped = calibrate(MEASURED_7B_PEAKS, gqa_ratio=0.25)
    assert grouped.per_context_token == pytest.approx(4 * full.per_context_token)
    assert predict_peak(grouped, 4 * K, 1, 64 * K) == pytest.approx(predict_peak(full, 4 * K, 1, 64 * K))


def test_coefficients_round_trip(tmp_path):
    c = calibrate(MEASURED_7B_PEAKS)
    path = tmp_path / "m.json"
    c.save(path)
    assert MemoryModelCoefficients.load(path) == c


def test_read_measurements_with_header():
    text = "chunk_size,k,context_len,peak_gib\n2048,1,32768,41.6\n\n4096,1,32768,47.5\n"
    assert read_measurements(text) == [(2048, 1, 32768, 41.6), (4096, 1, 32768, 47.5)]


def test_read_measurements_bad_row():
    with pytest.raises(ValueError, match="line 2"):
        read_measurements("1,1,1,1\nx,1,1,1\n")


def test_regressor_interface():
    X = np.array([r[:3] for r in MEASURED_7B_PEAKS], dtype=float)
    y = np.array([r[3] for r in MEASURED_7B_PEAKS])
    with pytest.raises(NotFittedError):
        MemoryModel().predict(X)
    model = MemoryModel().fit(X, y)
    assert model.get_params() == {"gqa_ratio": 1.0}
    assert np.max(np.abs(model.predict(X) - y)) <= 1.0
    assert model.score(X, y) > 0.99
