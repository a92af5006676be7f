"""Helpers for the rank-4 (batch, channels, height, width) arrays that flow
through every layer. Training runs in float32; gradient checking builds the
same network in float64."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError

DEFAULT_DTYPE = np.float32

# Debug-mode finiteness checking. Off by default; the gradcheck driver and a
# few tests switch it on.
_check_finite = False


def set_finite_checks(enabled: bool) -> None:
    global _check_finite
    _check_finite = bool(enabled)


def finite_checks_enabled() -> bool:
    return _check_finite


def assert_finite(arr: np.ndarray, where: str) -> np.ndarray:
    if _check_finite and not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite values produced by {where}")
    return arr


def require_tensor4(arr: np.ndarray, name: str = "input") -> np.ndarray:
    if not isinstance(arr, np.ndarray) or arr.ndim != 4:
        shape = getattr(arr, "shape", None)
        raise DimensionError(f"{name} must be rank-4 (B, C, H, W), got shape {shape}")
    return arr


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    """Fan-in scaled uniform init, bound sqrt(6 / fan_in)."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
