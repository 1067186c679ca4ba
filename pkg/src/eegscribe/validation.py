"""Input validation helpers shared by the estimator-style API."""

from __future__ import annotations

import numpy as np

from .exceptions import DimensionError, LabelError, ParameterError

N_CLASSES = 9
N_CHANNELS = 32
EPOCH_SAMPLES = 250
SAMPLING_RATE_HZ = 250.0


def as_float_array(x, name="array", ndim=None, allow_non_finite=False) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise DimensionError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if not allow_non_finite and not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} contains NaN or infinite values")
    return arr


def check_epochs(X, name="epochs") -> np.ndarray:
    """Validate a (n_trials, n_channels, n_samples) epoch array."""
    arr = as_float_array(X, name, ndim=3)
    if arr.shape[0] < 1:
        raise DimensionError(f"{name} holds no trials")
    return arr


def check_labels(y, n=None, n_classes=N_CLASSES, name="labels") -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        as_int = arr.astype(np.int64)
        if not np.array_equal(as_int, arr):
            raise LabelError(f"{name} must be integer class indices")
        arr = as_int
    arr = arr.astype(np.int64)
    if n is not None and arr.shape[0] != n:
        raise DimensionError(f"{name} length {arr.shape[0]} does not match n={n}")
    if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
        raise LabelError(f"{name} must lie in [0, {n_classes})")
    return arr


def check_seed(seed) -> int:
    if seed is None:
        return 0
    if not isinstance(seed, (int, np.integer)) or seed < 0:
        raise ParameterError(f"seed must be a non-negative integer, got {seed!r}")
    return int(seed)
