"""Input checks shared by the estimators."""

import numbers

import numpy as np

from .exceptions import ValidationError


def check_cloud(X, *, name="cloud", allow_nonfinite=False) -> np.ndarray:
    """Return ``X`` as a C-contiguous float64 array of shape (n, 3)."""
    try:
        P = np.asarray(X, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{name} is not numeric: {exc}") from None
    if P.size == 0:
        return np.zeros((0, 3))
    if P.ndim == 1 and P.shape[0] == 3:
        P = P[None, :]
    if P.ndim != 2 or P.shape[1] != 3:
        raise ValidationError(f"{name} must have shape (n, 3), got {P.shape}")
    if not allow_nonfinite and not np.isfinite(P).all():
        raise ValidationError(f"{name} contains NaN or inf")
    return np.ascontiguousarray(P)


def check_positive(value, key, *, integer=False, allow_zero=False):
    kind = numbers.Integral if integer else numbers.Real
    if isinstance(value, bool) or not isinstance(value, kind):
        raise ValidationError(f"expected {'an integer' if integer else 'a number'}, got {value!r}", key)
    if not np.isfinite(value) or value < 0 or (value == 0 and not allow_zero):
        raise ValidationError(f"must be {'>= 0' if allow_zero else '> 0'}, got {value!r}", key)
    return value


def check_probability(value, key):
    if isinstance(value, bool) or not isinstance(value, numbers.Real) or not 0.0 < value < 1.0:
        raise ValidationError(f"must lie in (0, 1), got {value!r}", key)
    return float(value)
