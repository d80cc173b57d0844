"""Similarity-structure kernels: cosine matrices, fixed Top-K neighborhoods,
temperature softmax over neighbor scores, and row-wise KL divergence.

All operations are pure and deterministic; ties in neighbor selection break
by ascending column index so results are platform independent.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .vocab import EmbeddingTable


@dataclass(frozen=True)
class SimilarityMatrix:
    row_names: tuple[str, ...]
    col_names: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64)
        if values.shape != (len(self.row_names), len(self.col_names)):
            raise ValueError("similarity shape does not match name lists")
        if values.size and (values.min() < -1.0 - 1e-9 or values.max() > 1.0 + 1e-9):
            raise ValueError("cosine similarities must lie in [-1, 1]")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "row_names", tuple(self.row_names))
        object.__setattr__(self, "col_names", tuple(self.col_names))

    @property
    def square(self) -> bool:
        return self.row_names == self.col_names


@dataclass(frozen=True)
class NeighborhoodIndex:
    """Per-row fixed list of exactly k column indices."""

    k: int
    indices: np.ndarray
    n_cols: int
    frozen: bool = False

    def __post_init__(self) -> None:
        indices = np.array(self.indices, dtype=np.int64)
        if indices.ndim != 2 or indices.shape[1] != self.k:
            raise ValueError("neighborhood indices must be an n x k matrix")
        if indices.size and (indices.min() < 0 or indices.max() >= self.n_cols):
            raise ValueError("neighbor index out of column range")
        for i, row in enumerate(indices):
            if len(set(row.tolist())) != self.k:
                raise ValueError(f"repeated neighbor in row {i}")
        indices.setflags(write=False)
        object.__setattr__(self, "indices", indices)

    def digest(self) -> str:
        """Stable content hash, used to assert the freeze invariant."""
        h = hashlib.sha256()
        h.update(np.int64(self.k).tobytes())
        h.update(np.ascontiguousarray(self.indices).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class NeighborDistribution:
    """Row-stochastic matrix over each row's k neighbors."""

    probs: np.ndarray
    temperature: float

    def __post_init__(self) -> None:
        probs = np.array(self.probs, dtype=np.float64)
        if probs.ndim != 2:
            raise ValueError("neighbor distribution must be an n x k matrix")
        if probs.size:
            if probs.min() <= 0.0:
                raise ValueError("neighbor probabilities must be strictly positive")
            if np.abs(probs.sum(axis=1) - 1.0).max() > 1e-9:
                raise ValueError("neighbor distribution rows must sum to 1")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)


def normalized_rows(rows: np.ndarray, names: tuple[str, ...]) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=1)
    zero = np.nonzero(norms == 0.0)[0]
    if zero.size:
        raise ValueError(f"zero-norm row for primitive {names[zero[0]]!r}")
    return rows / norms[:, None]


def cosine_matrix(a: EmbeddingTable, b: EmbeddingTable) -> SimilarityMatrix:
    """Pairwise cosine similarity of the rows of ``a`` against the rows of ``b``."""
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    an = normalized_rows(a.rows, a.names)
    bn = normalized_rows(b.rows, b.names)
    values = np.clip(an @ bn.T, -1.0, 1.0)
    return SimilarityMatrix(a.names, b.names, values)


def topk_neighbors(s: SimilarityMatrix, k: int, exclude_self: bool, frozen: bool = False) -> NeighborhoodIndex:
    """Indices of each row's k most similar columns, descending, ties by index.

    With ``exclude_self`` the diagonal entry is skipped, which requires a
    square matrix over one name list.
    """
    n_rows, n_cols = s.values.shape
    if exclude_self and not s.square:
        raise ValueError("exclude_self requires a square similarity matrix")
    bound = n_cols - (1 if exclude_self else 0)
    if not 1 <= k <= bound:
        raise ValueError(f"k={k} out of range, must satisfy 1 <= k <= {bound}")
    out = np.empty((n_rows, k), dtype=np.int64)
    for i in range(n_rows):
        # stable sort on the negated row keeps ascending index order for ties
        order = np.argsort(-s.values[i], kind="stable")
        if exclude_self:
            order = order[order != i]
        out[i] = order[:k]
    return NeighborhoodIndex(k=k, indices=out, n_cols=n_cols, frozen=frozen)


def gather_rows(s: SimilarityMatrix, idx: NeighborhoodIndex) -> np.ndarray:
    """out[i][j] = s[i][idx[i][j]]; the k-wide neighborhood score matrix."""
    if idx.n_cols != s.values.shape[1] or idx.indices.shape[0] != s.values.shape[0]:
        raise ValueError("neighborhood index shape does not match similarity matrix")
    return np.take_along_axis(s.values, idx.indices, axis=1)


def gather_matrix(values: np.ndarray, idx: NeighborhoodIndex) -> np.ndarray:
    """Same gather for a raw matrix (gradient plumbing)."""
    return np.take_along_axis(values, idx.indices, axis=1)


def softmax_rows(scores: np.ndarray, tau: float) -> NeighborDistribution:
    """Row-wise softmax of ``scores / tau`` with max subtraction for stability."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    scaled = np.asarray(scores, dtype=np.float64) / tau
    scaled = scaled - scaled.max(axis=1, keepdims=True)
    e = np.exp(scaled)
    probs = e / e.sum(axis=1, keepdims=True)
    return NeighborDistribution(probs, tau)


def kl_rows(p: NeighborDistribution, q: NeighborDistribution) -> np.ndarray:
    """Per-row KL divergence of ``p`` from ``q`` (reference distribution first)."""
    if p.probs.shape != q.probs.shape:
        raise ValueError("distribution shapes do not match")
    return np.sum(p.probs * np.log(p.probs / q.probs), axis=1)
