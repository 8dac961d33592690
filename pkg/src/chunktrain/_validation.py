"""Small input-checking helpers shared by the estimators and the CLI."""

from __future__ import annotations

import numbers


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


def check_positive_int(value, name, *, allow_zero=False):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise ValidationError(f"{name} must be an integer, got {value!r}")
    value = int(value)
    if value < 0 or (value == 0 and not allow_zero):
        bound = ">= 0" if allow_zero else ">= 1"
        raise ValidationError(f"{name} must be {bound}, got {value}")
    return value


def check_nonnegative(value, name):
    value = float(value)
    if not value >= 0.0:
        raise ValidationError(f"{name} must be >= 0, got {value}")
    return value


def check_ascending(values, name, *, strict=True):
    values = list(values)
    for a, b in zip(values, values[1:]):
        if b < a or (strict and b == a):
            kind = "strictly ascending" if strict else "ascending"
            raise ValidationError(f"{name} must be {kind}: {values}")
    return values


def check_is_fitted(estimator, attributes):
    """Raise ``sklearn.exceptions.NotFittedError`` if ``attributes`` are missing."""
    from sklearn.exceptions import NotFittedError

    if isinstance(attributes, str):
        attributes = [attributes]
    if not all(hasattr(estimator, attr) for attr in attributes):
        raise NotFittedError(
            f"This {type(estimator).__name__} instance is not fitted yet. "
            "Call 'fit' with appropriate arguments first."
        )
