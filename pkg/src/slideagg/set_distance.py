"""Median-of-minimums distance between two patch sets, no aggregation involved.

``d(A, B)`` takes every patch of ``A``, finds its nearest patch in ``B`` and
returns the median of those minima. It is directional: ``d(A, B)`` and
``d(B, A)`` differ in general, and callers always pass the query first.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from slideagg.dataset import PatchSet
from slideagg.errors import ShapeError

METRICS = ("euclidean", "hamming")


def _tail_mask(nbits: int) -> np.ndarray:
    n_words = (nbits + 63) // 64
    mask = np.full(n_words, np.uint64(0xFFFFFFFFFFFFFFFF), dtype=np.uint64)
    if nbits % 64:
        mask[-1] = np.uint64((1 << (nbits % 64)) - 1)
    return mask


def hamming(a: np.ndarray, b: np.ndarray, nbits: int | None = None) -> int:
    """Population count of ``a XOR b`` over the first ``nbits`` bits of packed words."""
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    if a.shape != b.shape:
        raise ShapeError(f"hamming: length mismatch {a.shape} vs {b.shape}")
    nbits = a.size * 64 if nbits is None else nbits
    if (nbits + 63) // 64 != a.size:
        raise ShapeError(f"hamming: {a.size} words cannot hold exactly {nbits} bits")
    return int(np.bitwise_count((a ^ b) & _tail_mask(nbits)).sum())


def hamming_matrix(a: np.ndarray, b: np.ndarray, nbits: int) -> np.ndarray:
    """All pairwise Hamming distances between rows of two packed matrices."""
    a = np.atleast_2d(np.asarray(a, dtype=np.uint64))
    b = np.atleast_2d(np.asarray(b, dtype=np.uint64))
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"hamming: word count mismatch {a.shape[1]} vs {b.shape[1]}")
    mask = _tail_mask(nbits)
    out = np.empty((a.shape[0], b.shape[0]), dtype=np.int64)
    for i, row in enumerate(a):
        out[i] = np.bitwise_count((b ^ row) & mask).sum(axis=1)
    return out


def _rows(s):
    return s.patches if isinstance(s, PatchSet) else np.asarray(s)


def median_of_minimums(a, b, metric: str = "euclidean", nbits: int | None = None) -> float:
    """Median over rows of ``a`` of the distance to the nearest row of ``b``.

    For ``metric="hamming"`` both inputs are packed uint64 matrices holding
    ``nbits`` bits per row.
    """
    xa, xb = _rows(a), _rows(b)
    if xa.ndim != 2 or xb.ndim != 2 or len(xa) == 0 or len(xb) == 0:
        raise ShapeError("median_of_minimums: both sets must be non-empty 2-D matrices")
    if xa.shape[1] != xb.shape[1]:
        raise ShapeError(f"median_of_minimums: dimension mismatch {xa.shape[1]} vs {xb.shape[1]}")
    if metric == "euclidean":
        dist = cdist(xa.astype(np.float64), xb.astype(np.float64))
    elif metric == "hamming":
        if nbits is None:
            raise ValueError("median_of_minimums: hamming needs nbits")
        dist = hamming_matrix(xa, xb, nbits)
    else:
        raise ValueError(f"unknown patch metric {metric!r}; expected one of {METRICS}")
    return float(np.median(dist.min(axis=1)))


def pairwise_set_distances(slides: Sequence, metric: str = "euclidean", nbits: int | None = None) -> np.ndarray:
    """Matrix ``D[i, j] = median_of_minimums(slides[i], slides[j])``; the diagonal is 0."""
    n = len(slides)
    if n < 1:
        raise ValueError("pairwise_set_distances: need at least one slide")
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                out[i, j] = median_of_minimums(slides[i], slides[j], metric, nbits)
    return out
