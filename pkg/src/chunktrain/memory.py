"""Affine peak-memory model calibrated by least squares.

``peak_gib = base + per_chunk_token * k * chunk_size
            + per_context_token * gqa_ratio * context_len``
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from ._validation import ValidationError, check_is_fitted

KIB = 1024

# 7B model, K=1, context length x ChunkSize -> peak GiB
MEASURED_7B_PEAKS = [
    (2 * KIB, 1, 32 * KIB, 41.6),
    (2 * KIB, 1, 256 * KIB, 45.6),
    (4 * KIB, 1, 32 * KIB, 47.5),
    (4 * KIB, 1, 256 * KIB, 50.8),
    (8 * KIB, 1, 32 * KIB, 59.3),
    (8 * KIB, 1, 256 * KIB, 63.8),
]


class CalibrationError(ValidationError):
    pass


@dataclass(frozen=True)
class MemoryModelCoefficients:
    base: float
    per_chunk_token: float
    per_context_token: float
    gqa_ratio: float = 1.0
    max_residual: float = 0.0

    def __post_init__(self):
        for name in ("base", "per_chunk_token", "per_context_token", "gqa_ratio"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0, got {getattr(self, name)}")

    def dumps(self):
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def loads(cls, text):
        return cls(**json.loads(text))

    def save(self, path):
        Path(path).write_text(self.dumps() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.loads(Path(path).read_text(encoding="utf-8"))


UNLIMITED = MemoryModelCoefficients(0.0, 0.0, 0.0)


def _design(chunk_size, k, context_len, gqa_ratio):
    chunk_size = np.asarray(chunk_size, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    context_len = np.asarray(context_len, dtype=np.float64)
    return np.column_stack([np.ones_like(chunk_size), k * chunk_size, gqa_ratio * context_len])


def calibrate(measurements, gqa_ratio: float = 1.0) -> MemoryModelCoefficients:
    """Least-squares fit to rows of ``(chunk_size, k, context_len, peak_gib)``."""
    rows = np.asarray(list(measurements), dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != 4 or len(rows) < 3:
        raise CalibrationError("need at least 3 measurements of (chunk_size, k, context_len, peak_gib)")
    if not gqa_ratio > 0:
        raise CalibrationError("gqa_ratio must be > 0")
    budget = rows[:, 0] * rows[:, 1]
    missing = []
    if len(np.unique(budget)) < 2:
        missing.append("activation budget k*chunk_size")
    if len(np.unique(rows[:, 2])) < 2:
        missing.append("context length")
    X = _design(rows[:, 0], rows[:, 1], rows[:, 2], gqa_ratio)
    if not missing and np.linalg.matrix_rank(X) < 3:
        missing.append("independent activation-budget and context variation")
    if missing:
        raise CalibrationError("rank-deficient measurements: no variation in " + " or ".join(missing))
    coef, *_ = np.linalg.lstsq(X, rows[:, 3], rcond=None)
    resid = rows[:, 3] - X @ coef
    if np.any(coef < -1e-12):
        raise CalibrationError(f"fit produced negative coefficients {coef.tolist()}")
    coef = np.maximum(coef, 0.0)
    return MemoryModelCoefficients(float(coef[0]), float(coef[1]), float(coef[2]), float(gqa_ratio),
                                   float(np.max(np.abs(resid))))


def predict_peak(coeffs: MemoryModelCoefficients, chunk_size, k, context_len):
    """Predicted peak GiB; broadcasts over array arguments."""
    out = (coeffs.base + coeffs.per_chunk_token * np.multiply(k, chunk_size)
           + coeffs.per_context_token * coeffs.gqa_ratio * np.asarray(context_len, dtype=np.float64))
    return float(out) if np.ndim(out) == 0 else out


def read_measurements(source):
    """Parse CSV rows ``chunk_size,k,context_len,peak_gib``; a header row is optional."""
    if isinstance(source, (str, Path)) and Path(source).exists():
        text = Path(source).read_text(encoding="utf-8")
    elif isinstance(source, str):
        text = source
    else:
        text = source.read()
    rows = []
    for lineno, rec in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not rec or not "".join(rec).strip():
            continue
        try:
            cs, k, ctx, peak = (float(x) for x in rec[:4])
        except ValueError:
            if lineno == 1:
                continue
            raise ValidationError(f"line {lineno}: expected 4 numeric fields, got {rec}") from None
        rows.append((cs, k, ctx, peak))
    return rows


class MemoryModel(RegressorMixin, BaseEstimator):
    """Regressor front-end: ``X`` columns are ``(chunk_size, k, context_len)``, ``y`` is peak GiB.

    Parameters
    ----------
    gqa_ratio : float
        Key/value heads over query heads; scales the context term.
    """

    def __init__(self, gqa_ratio=1.0):
        self.gqa_ratio = gqa_ratio

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != 3 or len(X) != len(y):
            raise ValidationError("X must have shape (n, 3) and match y")
        self.coef_ = calibrate(np.column_stack([X, y]), self.gqa_ratio)
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = np.asarray(X, dtype=np.float64)
        return np.asarray(predict_peak(self.coef_, X[:, 0], X[:, 1], X[:, 2]), dtype=np.float64)
