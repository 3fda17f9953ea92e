"""Descriptor similarity and mutual nearest-neighbour matching."""

from __future__ import annotations

import numpy as np

__all__ = ["similarity", "mnn_match"]


def similarity(d0: np.ndarray, d1: np.ndarray) -> np.ndarray:
    """Pairwise dot products between two unit-row descriptor stacks.

    Returns the (N0, N1) matrix M with M[i, j] = d0[i] . d1[j].
    """
    d0 = np.asarray(d0, dtype=np.float64)
    d1 = np.asarray(d1, dtype=np.float64)
    if d0.ndim != 2 or d1.ndim != 2:
        raise ValueError(f"descriptor stacks must be 2-D, got {d0.shape} and {d1.shape}")
    if d0.shape[1] != d1.shape[1]:
        raise ValueError(
            f"descriptor dimensions differ: {d0.shape[1]} vs {d1.shape[1]}")
    return d0 @ d1.T


def mnn_match(m: np.ndarray, min_similarity: float | None = None) -> np.ndarray:
    """Mutual nearest neighbours of a similarity matrix.

    A pair (i, j) matches when j is the argmax of row i and i is the
    argmax of column j; argmax ties go to the lowest index. With
    ``min_similarity`` set, pairs below it are dropped. Returns an
    (K, 2) int array of index pairs sorted by row index.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"similarity matrix must be 2-D, got shape {m.shape}")
    if m.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    best_col = m.argmax(axis=1)  # np.argmax takes the first of equal maxima
    best_row = m.argmax(axis=0)
    rows = np.arange(m.shape[0])
    mutual = best_row[best_col] == rows
    pairs = np.stack([rows[mutual], best_col[mutual]], axis=1)
    if min_similarity is not None:
        pairs = pairs[m[pairs[:, 0], pairs[:, 1]] >= min_similarity]
    return pairs.astype(np.int64)
