"""Input validation helpers.

Small check_* functions in the spirit of sklearn's validation utilities:
they coerce to float64 arrays, enforce shapes, and raise ValueError with
the offending name in the message.
"""

from __future__ import annotations

import numpy as np


def check_vector3(v, name: str = "vector") -> np.ndarray:
    """Coerce to a (3,) float64 vector."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.shape != (3,):
        raise ValueError(f"{name} must have shape (3,), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_points(x, name: str = "points", allow_empty: bool = False) -> np.ndarray:
    """Coerce to an (N, 3) float64 array of finite points."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1 and arr.shape == (3,):
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {arr.shape}")
    if not allow_empty and arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return np.ascontiguousarray(arr)


def check_rotation(r, atol: float = 1e-6, name: str = "rotation") -> np.ndarray:
    """Validate a 3x3 proper rotation matrix (orthonormal, det +1)."""
    arr = np.asarray(r, dtype=np.float64)
    if arr.shape != (3, 3):
        raise ValueError(f"{name} must have shape (3, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if not np.allclose(arr.T @ arr, np.eye(3), atol=atol):
        raise ValueError(f"{name} is not orthonormal within {atol}")
    if abs(np.linalg.det(arr) - 1.0) > atol:
        raise ValueError(f"{name} must have determinant +1 within {atol}")
    return arr


def check_positive(value: float, name: str = "value") -> float:
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be a positive finite number, got {value}")
    return value


def check_non_negative(value: float, name: str = "value") -> float:
    value = float(value)
    if not np.isfinite(value) or value < 0:
        raise ValueError(f"{name} must be non-negative and finite, got {value}")
    return value


def check_resolution(resolution) -> tuple[int, int, int]:
    """Coerce a scalar or 3-sequence into per-axis voxel counts >= 2."""
    if np.isscalar(resolution):
        res = (int(resolution),) * 3
    else:
        res = tuple(int(n) for n in resolution)
    if len(res) != 3 or any(n < 2 for n in res):
        raise ValueError(f"resolution must be >= 2 per axis, got {resolution}")
    return res
