"""Input checks shared by the estimators."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array, check_consistent_length

from .domain import DomainError


def column(X, name: str = "X") -> np.ndarray:
    """Accept a 1-d array or an ``(n, 1)`` column and return a float 1-d array."""
    arr = np.asarray(X, dtype=float)
    if arr.ndim == 2:
        if arr.shape[1] != 1:
            raise DomainError(f"{name} must have a single feature column, got shape {arr.shape}")
        arr = arr[:, 0]
    return check_array(arr, ensure_2d=False, dtype=float, input_name=name)


def xy(X, y, min_samples: int = 1):
    x = column(X, "X")
    yy = check_array(np.asarray(y, dtype=float), ensure_2d=False, dtype=float, input_name="y")
    check_consistent_length(x, yy)
    if x.size < min_samples:
        raise DomainError(f"need at least {min_samples} samples, got {x.size}")
    order = np.argsort(x, kind="stable")
    return x[order], yy[order], order


def optional_sigma(sigma, n: int):
    if sigma is None:
        return None
    s = np.asarray(sigma, dtype=float)
    if s.shape != (n,) or np.any(~(s > 0)):
        raise DomainError("sigma must be positive with one entry per sample")
    return s
