"""Slide-level embeddings in dense, sparse, or bit-packed form."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from slideagg.io import words_for_bits

SPARSE_TOL = 1e-8


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack a boolean vector (or matrix of rows) into little-endian uint64 words."""
    bits = np.asarray(bits, dtype=bool)
    squeeze = bits.ndim == 1
    bits = np.atleast_2d(bits)
    nbits = bits.shape[1]
    n_words = words_for_bits(nbits)
    padded = np.zeros((bits.shape[0], n_words * 64), dtype=bool)
    padded[:, :nbits] = bits
    packed = np.packbits(padded, axis=1, bitorder="little").view("<u8").astype(np.uint64)
    return packed[0] if squeeze else packed


def unpack_bits(words: np.ndarray, nbits: int) -> np.ndarray:
    words = np.asarray(words, dtype=np.uint64)
    squeeze = words.ndim == 1
    words = np.atleast_2d(words)
    as_bytes = np.ascontiguousarray(words.astype("<u8")).view(np.uint8)
    bits = np.unpackbits(as_bytes, axis=1, bitorder="little")[:, :nbits].astype(bool)
    return bits[0] if squeeze else bits


@dataclass(frozen=True, eq=False)
class SlideEmbedding:
    """A single vector per slide.

    ``kind`` is ``"dense"`` (``data`` is the float vector), ``"sparse"``
    (``data`` holds the nonzero values at ``indices``) or ``"binary"``
    (``data`` is the packed uint64 words). ``dim`` is the logical length in
    values or bits.
    """

    kind: str
    data: np.ndarray
    dim: int
    indices: np.ndarray | None = None

    @classmethod
    def dense_of(cls, vector) -> "SlideEmbedding":
        vector = np.asarray(vector, dtype=np.float64).ravel()
        return cls("dense", vector, vector.size)

    @classmethod
    def sparse_or_dense(cls, vector, tol: float = SPARSE_TOL) -> "SlideEmbedding":
        """Store sparsely when at least half the entries are zero within ``tol``."""
        vector = np.asarray(vector, dtype=np.float64).ravel()
        nonzero = np.flatnonzero(np.abs(vector) > tol)
        if 2 * nonzero.size <= vector.size:
            return cls("sparse", vector[nonzero], vector.size, nonzero)
        return cls("dense", vector, vector.size)

    @classmethod
    def binary_of(cls, vector) -> "SlideEmbedding":
        """Sign bits: bit j is set iff ``vector[j] > 0`` (zero maps to 0)."""
        vector = np.asarray(vector).ravel()
        return cls("binary", pack_bits(vector > 0), vector.size)

    def dense(self) -> np.ndarray:
        if self.kind == "dense":
            return self.data
        if self.kind == "sparse":
            out = np.zeros(self.dim)
            out[self.indices] = self.data
            return out
        return unpack_bits(self.data, self.dim).astype(np.float64)

    @property
    def is_binary(self) -> bool:
        return self.kind == "binary"


def stack_dense(embeddings) -> np.ndarray:
    return np.vstack([e.dense() for e in embeddings]) if embeddings else np.zeros((0, 0))


def stack_packed(embeddings) -> tuple[np.ndarray, int]:
    nbits = {e.dim for e in embeddings}
    if len(nbits) != 1:
        raise ValueError(f"binary embeddings disagree on bit length: {sorted(nbits)}")
    return np.vstack([e.data for e in embeddings]), nbits.pop()
