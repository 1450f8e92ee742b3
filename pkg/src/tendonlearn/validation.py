"""Small input-validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


def as_float_array(x, name: str = "array") -> np.ndarray:
    """Coerce to a float64 ndarray and reject non-finite entries."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def as_vector(x, n: int, name: str = "vector") -> np.ndarray:
    arr = as_float_array(x, name)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1 or arr.shape[0] != n:
        raise ValueError(f"{name} must be a length-{n} vector, got shape {arr.shape}")
    return arr


def as_matrix(x, n_cols: int, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array with a fixed column count (rows free)."""
    arr = as_float_array(x, name)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[1] != n_cols:
        raise ValueError(f"{name} must have {n_cols} columns, got shape {arr.shape}")
    return arr


def check_positive(value: float, name: str) -> float:
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value!r}")
    return float(value)
