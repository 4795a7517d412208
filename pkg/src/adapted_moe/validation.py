"""Input validation in the spirit of ``sklearn.utils.check_array``."""
from __future__ import annotations

import numpy as np

from .exceptions import DimensionError


def check_feature_maps(X, channels: int | None = None, allow_single: bool = True) -> np.ndarray:
    """Return ``X`` as a finite float32 N×C×H×W array.

    A single C×H×W map is promoted to a batch of one when ``allow_single``.
    """
    X = np.asarray(X)
    if X.dtype == object or not np.issubdtype(X.dtype, np.number):
        raise TypeError(f"feature maps must be numeric, got dtype {X.dtype}")
    if X.ndim == 3 and allow_single:
        X = X[None]
    if X.ndim != 4:
        raise DimensionError(f"expected N×C×H×W feature maps, got shape {X.shape}")
    if 0 in X.shape:
        raise DimensionError(f"empty feature maps of shape {X.shape}")
    if channels is not None and X.shape[1] != channels:
        raise DimensionError(f"channels: got {X.shape[1]}, expected {channels}")
    X = X.astype(np.float32, copy=False)
    if not np.isfinite(X).all():
        raise ValueError("feature maps contain NaN or infinity")
    return X


def check_subclass_labels(y, n_samples: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n_samples:
        raise DimensionError(f"expected {n_samples} subclass labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("subclass labels must be integers")
    y = y.astype(np.int64)
    if y.min() < 0:
        raise ValueError("subclass labels must be >= 0")
    return y


def check_binary_labels(y, name: str = "labels") -> np.ndarray:
    y = np.asarray(y)
    if not np.isin(y, (0, 1)).all():
        raise ValueError(f"{name} must contain only 0 and 1")
    return y.astype(np.int64)
