"""Shared helpers for the test suite."""
from __future__ import annotations

import numpy as np


def rel_err(actual, expected) -> float:
    """Relative error of a gradient/array against its oracle value."""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    denom = max(float(np.linalg.norm(expected)), 1e-12)
    return float(np.linalg.norm(actual - expected)) / denom
