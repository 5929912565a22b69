"""Input validation helpers shared by the estimator and the CLI."""
from __future__ import annotations

import numpy as np

from .exceptions import ContractError, DimensionError


def check_sequences(X, min_len: int = 2, ensure_unit_range: bool = True) -> np.ndarray:
    """Validate a batch of videos and return it as float32 (N, T, C, H, W).

    A 4-D array (N, T, H, W) is taken as single-channel video.
    """
    X = np.asarray(X)
    if X.dtype == np.uint8:
        X = X.astype(np.float32) / 255.0
    X = X.astype(np.float32, copy=False)
    if X.ndim == 4:
        X = X[:, :, None]
    if X.ndim != 5:
        raise DimensionError(f"expected videos shaped (N, T, C, H, W), got {X.ndim}-D array")
    if X.shape[0] < 1:
        raise ContractError("need at least one sequence")
    if X.shape[1] < min_len:
        raise ContractError(f"sequences need at least {min_len} frames, got {X.shape[1]}")
    if not np.isfinite(X).all():
        raise ContractError("input contains NaN or Inf")
    if ensure_unit_range and (X.min() < 0 or X.max() > 1):
        raise ContractError("pixel values must lie in [0, 1]")
    return X


def check_frame_shape(X: np.ndarray, channels: int, size) -> None:
    if X.shape[2] != channels or tuple(X.shape[3:]) != tuple(size):
        raise DimensionError(
            f"frames are {X.shape[2:]}, the fitted network expects ({channels}, {size[0]}, {size[1]})")
