"""Small input-validation helpers shared by the estimators and stage functions."""
from __future__ import annotations

import numpy as np

from .exceptions import DataValidationError

SIMPLEX_ATOL = 1e-12


def check_finite_array(x, name: str, ndim: int | None = None, dtype=np.float64) -> np.ndarray:
    arr = np.asarray(x, dtype=dtype)
    if ndim is not None and arr.ndim != ndim:
        raise DataValidationError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataValidationError(f"{name} contains non-finite values")
    return arr


def check_bins(bins, d_a: int, n_bins: int, name: str = "action_bins") -> np.ndarray:
    arr = np.asarray(bins)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != d_a:
        raise DataValidationError(f"{name} must have shape (n, {d_a}), got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise DataValidationError(f"{name} must be integers")
        arr = arr.astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= n_bins):
        raise DataValidationError(f"{name} out of range [0, {n_bins})")
    return arr.astype(np.int64, copy=False)


def check_simplex(alpha, name: str = "alpha", atol: float = SIMPLEX_ATOL) -> np.ndarray:
    a = check_finite_array(alpha, name, ndim=1)
    if a.size == 0:
        raise DataValidationError(f"{name} is empty")
    if np.any(a < 0):
        raise DataValidationError(f"{name} has negative entries")
    if abs(a.sum() - 1.0) > atol:
        raise DataValidationError(f"{name} sums to {a.sum()!r}, expected 1")
    return a


def normalize_simplex(a: np.ndarray) -> np.ndarray:
    """Renormalize a non-negative vector so it sums to one (guards float drift)."""
    a = np.asarray(a, dtype=np.float64)
    total = a.sum()
    if not np.isfinite(total) or total <= 0:
        raise DataValidationError("cannot normalize a vector with non-positive mass")
    return a / total
