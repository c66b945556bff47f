"""Small input-validation helpers used at public API boundaries."""

from __future__ import annotations

import numpy as np

from .errors import ShapeMismatch, ValidationError


def as_array(x, shape=None, name="array", dtype=np.float64):
    """Coerce to a contiguous ndarray, optionally checking the shape.

    ``shape`` entries of ``None`` match any extent.
    """
    arr = np.ascontiguousarray(x, dtype=dtype)
    if shape is not None:
        if arr.ndim != len(shape):
            raise ShapeMismatch(f"{name}: expected {len(shape)} dims, got {arr.ndim}")
        for want, got in zip(shape, arr.shape):
            if want is not None and want != got:
                raise ShapeMismatch(f"{name}: expected shape {shape}, got {arr.shape}")
    return arr


def check_finite(x, name="array"):
    if not np.all(np.isfinite(x)):
        raise ValidationError(f"{name} contains non-finite values")
    return x


def check_same_hw(*arrays, names=None):
    """Require every array to share the leading H, W extents."""
    base = arrays[0].shape[:2]
    for i, a in enumerate(arrays[1:], start=1):
        if a.shape[:2] != base:
            label = names[i] if names else f"argument {i}"
            raise ShapeMismatch(f"{label}: expected H,W {base}, got {a.shape[:2]}")
    return base


def require(cond, message, exc=ValidationError):
    if not cond:
        raise exc(message)
