"""Image- and pixel-level AUROC."""
from __future__ import annotations

import numpy as np

from .exceptions import DimensionError


def midranks(values) -> np.ndarray:
    """1-based ranks with tied values sharing the mean of their positions."""
    v = np.asarray(values, dtype=np.float64).ravel()
    order = np.argsort(v, kind="mergesort")
    sv = v[order]
    ranks = np.empty(len(v))
    # boundaries of runs of equal values
    edges = np.flatnonzero(np.diff(sv)) + 1
    starts = np.concatenate([[0], edges])
    ends = np.concatenate([edges, [len(v)]])
    run_rank = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(run_rank, ends - starts)
    return ranks


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: P(score_pos > score_neg) + 0.5·P(tie)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise DimensionError(f"{s.size} scores for {y.size} labels")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = int((y == 0).sum())
    if n_pos + n_neg != y.size:
        raise ValueError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs at least one positive and one negative label")
    r = midranks(s)
    u = r[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pixel_auroc(maps, masks, per_image: bool = False) -> float:
    """AUROC over the pixels of all maps pooled together.

    With ``per_image`` the AUROC is computed per map and averaged over the
    maps whose mask contains both classes.
    """
    if len(maps) != len(masks):
        raise DimensionError(f"{len(maps)} maps for {len(masks)} masks")
    for i, (m, k) in enumerate(zip(maps, masks)):
        if np.shape(m) != np.shape(k):
            raise DimensionError(f"map {i} shape {np.shape(m)} != mask shape {np.shape(k)}")
    if per_image:
        vals = [auroc(m, k) for m, k in zip(maps, masks) if 0 < np.sum(k) < np.size(k)]
        if not vals:
            raise ValueError("no image contains both pixel classes")
        return float(np.mean(vals))
    flat_s = np.concatenate([np.ravel(m) for m in maps])
    flat_y = np.concatenate([np.ravel(k) for k in masks]).astype(np.int64)
    return auroc(flat_s, flat_y)
