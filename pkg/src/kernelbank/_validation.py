"""Input validation helpers built on sklearn's checkers."""

import numpy as np
from sklearn.utils.validation import check_array, check_consistent_length


def check_times(times, strictly_increasing=True):
    """1-D finite float array of timestamps."""
    times = check_array(np.asarray(times, dtype=float), ensure_2d=False, dtype=float, copy=True)
    if times.ndim != 1:
        raise ValueError(f"times must be 1-D, got shape {times.shape}")
    if strictly_increasing and times.shape[0] > 1 and np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    return times


def check_times_values(times, values):
    times = check_times(times)
    values = check_array(np.asarray(values, dtype=float), ensure_2d=False, dtype=float, copy=True)
    if values.ndim != 1:
        raise ValueError(f"values must be 1-D, got shape {values.shape}")
    check_consistent_length(times, values)
    return times, values


def check_positive(name, value):
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be a positive finite number, got {value!r}")
    return value
