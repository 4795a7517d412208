"""Closed-form test-time adaptation by per-dimension moment matching.

A test map's location embeddings are standardized with their own
per-dimension mean and std, rescaled to the expert's training std,
re-centered on the expert's subclass center, then each row is unit
normalized.  Nothing is learned at test time.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DimensionError
from .numeric import NORM_EPS, l2_normalize

DEGENERATE_EPS = 1e-8
STD_MODES = ("vector", "scalar")


@dataclass
class CalibrationStats:
    center: np.ndarray  # C'
    std: np.ndarray  # C'
    count: int
    eps: float = DEGENERATE_EPS

    @property
    def degenerate(self) -> np.ndarray:
        return self.std < self.eps


def _std(E: np.ndarray, mode: str) -> np.ndarray:
    if mode == "vector":
        return E.std(axis=0)
    if mode == "scalar":
        # one spread for all dims: RMS of the per-dimension stds
        return np.full(E.shape[1], np.sqrt(E.var(axis=0).mean()))
    raise ValueError(f"std mode must be one of {STD_MODES}, got {mode!r}")


def fit_calibration_stats(embeddings, center, std_mode: str = "vector",
                          eps: float = DEGENERATE_EPS) -> CalibrationStats:
    """Training statistics for one expert.

    ``embeddings`` are the per-location rows (M×C') of all training maps of
    the subclass; ``center`` is the routing center, reused as-is.  The std
    is the population std per dimension.
    """
    E = np.asarray(embeddings, dtype=np.float64)
    E = E.reshape(-1, E.shape[-1])
    if E.shape[0] < 2:
        raise ValueError("need at least 2 embeddings to fit calibration statistics")
    center = np.asarray(center, dtype=np.float64)
    if center.shape != (E.shape[1],):
        raise DimensionError(f"center shape {center.shape} vs embedding dim {E.shape[1]}")
    return CalibrationStats(center=center.copy(), std=_std(E, std_mode), count=E.shape[0], eps=eps)


def moment_match(E_test, stats: CalibrationStats, std_mode: str = "vector") -> np.ndarray:
    """Shift and rescale each dimension to the expert's (center, std).

    Dimensions where the test std or the training std is degenerate are
    replaced by the center value.
    """
    E = np.asarray(E_test, dtype=np.float64)
    if E.ndim != 2 or E.shape[0] < 2:
        raise ValueError(f"calibration needs an HW×C' array with >= 2 rows, got {E.shape}")
    if E.shape[1] != stats.center.shape[0]:
        raise DimensionError(f"embedding dim {E.shape[1]} vs stats dim {stats.center.shape[0]}")
    mean = E.mean(axis=0)
    test_std = _std(E, std_mode)
    passthrough = (test_std < stats.eps) | stats.degenerate
    scale = np.where(passthrough, 0.0, stats.std / np.where(passthrough, 1.0, test_std))
    return (E - mean) * scale + stats.center


def calibrate(E_test, stats: CalibrationStats, std_mode: str = "vector",
              renormalize: bool = True) -> np.ndarray:
    """Moment-match a test map to an expert, then unit-normalize each row.

    Rows that come out as (numerically) zero, which happens only when the
    expert's center itself vanishes on every dimension that passes through,
    are left at zero instead of raising.
    """
    out = moment_match(E_test, stats, std_mode)
    if not renormalize:
        return out
    norms = np.sqrt((out * out).sum(axis=1, keepdims=True))
    ok = norms[:, 0] > NORM_EPS
    out[ok] = l2_normalize(out[ok])
    out[~ok] = 0.0
    return out
