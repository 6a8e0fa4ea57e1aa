"""Count-based word embeddings: ramped-window co-occurrence plus truncated SVD.

Step 1 accumulates a symmetric co-occurrence matrix where a context word at
distance ``d`` from the center contributes weight ``W - d + 1`` (maximal at
adjacency, ramping down to 1 at the window edge).  Step 2 normalizes the
matrix and keeps the top-k left singular directions; the embedding of word
``i`` is row ``i`` of ``U_k * diag(S_k)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .corpus import SentenceRecord, Vocabulary
from .errors import ConvergenceError

# Dense LAPACK SVD below this size; randomized subspace iteration above.
_DENSE_SVD_LIMIT = 256


class Normalization(Enum):
    NONE = "none"
    ROW_L1 = "row_l1"
    CORRELATION = "correlation"


@dataclass
class CountEmbeddingConfig:
    window_size: int = 10
    normalization: Normalization = Normalization.ROW_L1
    svd_rank: int = 64
    count_threshold: float | None = None  # optional per-cell cap
    seed: int = 0

    def __post_init__(self):
        if self.window_size < 1:
            raise ValueError("window_size must be >= 1")
        if self.svd_rank < 1:
            raise ValueError("svd_rank must be >= 1")


@dataclass
class CooccurrenceMatrix:
    """Sparse symmetric co-occurrence weights over a vocabulary of size N."""

    size: int
    window_size: int
    weights: dict[tuple[int, int], float] = field(default_factory=dict)
    symmetric: bool = True

    def add(self, i: int, j: int, weight: float) -> None:
        if weight <= 0:
            return
        self.weights[(i, j)] = self.weights.get((i, j), 0.0) + weight

    def get(self, i: int, j: int) -> float:
        return self.weights.get((i, j), 0.0)

    def total_weight(self) -> float:
        return sum(self.weights.values())

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.size, self.size), dtype=np.float64)
        for (i, j), w in self.weights.items():
            dense[i, j] = w
        return dense


def build_cooccurrence(
    sentences: Sequence[SentenceRecord] | Sequence[Sequence[int]],
    vocab_size: int,
    window_size: int = 10,
) -> CooccurrenceMatrix:
    """Accumulate ramped-window co-occurrence counts, one sentence at a time.

    Every ordered in-sentence pair at distance ``d in [1, window_size]``
    contributes ``window_size - d + 1``; accumulation is symmetric, and pairs
    never span sentence boundaries.  An empty corpus yields an empty matrix.

    Args:
        sentences: Encoded sentence records, or raw token-id sequences.
        vocab_size: Number of rows/columns (the vocabulary size).
        window_size: Context window W.
    """
    matrix = CooccurrenceMatrix(vocab_size, window_size)
    for sentence in sentences:
        ids = sentence.tokens if isinstance(sentence, SentenceRecord) else sentence
        length = len(ids)
        for t in range(length):
            for d in range(1, min(window_size, length - 1 - t) + 1):
                weight = float(window_size - d + 1)
                a, b = ids[t], ids[t + d]
                matrix.add(a, b, weight)
                matrix.add(b, a, weight)
    return matrix


def apply_count_threshold(matrix: CooccurrenceMatrix, cap: float) -> CooccurrenceMatrix:
    """Cap every cell at ``cap`` (tames rows of very frequent words)."""
    if cap <= 0:
        raise ValueError("cap must be positive")
    capped = CooccurrenceMatrix(matrix.size, matrix.window_size)
    capped.weights = {k: min(w, cap) for k, w in matrix.weights.items()}
    return capped


def normalize(matrix: CooccurrenceMatrix, mode: Normalization) -> np.ndarray:
    """Normalize counts into the dense matrix fed to the SVD.

    ``ROW_L1`` scales every nonzero row to sum 1.  ``CORRELATION`` computes
    the correlation of each cell against the expected count under row/column
    independence, clamps negatives to zero and takes the square root.
    All-zero rows are left untouched in either mode.
    """
    dense = matrix.to_dense()
    if mode is Normalization.NONE:
        return dense
    if mode is Normalization.ROW_L1:
        row_sums = dense.sum(axis=1, keepdims=True)
        safe = np.where(row_sums > 0, row_sums, 1.0)
        return dense / safe
    if mode is Normalization.CORRELATION:
        total = dense.sum()
        if total == 0:
            return dense
        row = dense.sum(axis=1)
        col = dense.sum(axis=0)
        numer = total * dense - np.outer(row, col)
        denom_sq = np.outer(row * (total - row), col * (total - col))
        corr = np.divide(
            numer,
            np.sqrt(np.maximum(denom_sq, 0.0)),
            out=np.zeros_like(dense),
            where=denom_sq > 0,
        )
        return np.sqrt(np.clip(corr, 0.0, None))
    raise ValueError(f"unknown normalization mode: {mode}")


def truncated_svd(
    matrix: np.ndarray,
    k: int,
    seed: int = 0,
    max_iter: int = 200,
    tol: float = 1e-10,
) -> tuple[np.ndarray, np.ndarray]:
    """Top-k singular triplets (left vectors and values) of a finite matrix.

    Small matrices go through the dense LAPACK path; larger ones use seeded
    randomized subspace iteration with re-orthonormalization, stopping when
    the top-k singular value estimates stabilize.

    Returns:
        (U_k, S_k): N x k orthonormal columns and the k singular values in
        non-increasing order.

    Raises:
        ConvergenceError: Iteration cap reached before stabilization.
        ValueError: Non-finite input or k out of range.
    """
    A = np.asarray(matrix, dtype=np.float64)
    if A.ndim != 2:
        raise ValueError("matrix must be 2-D")
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix contains NaN or Inf")
    if not 1 <= k <= min(A.shape):
        raise ValueError(f"k={k} out of range for shape {A.shape}")

    if min(A.shape) <= _DENSE_SVD_LIMIT:
        U, s, _ = np.linalg.svd(A, full_matrices=False)
        return U[:, :k].copy(), s[:k].copy()

    rng = np.random.default_rng(seed)
    n_cols = A.shape[1]
    p = min(n_cols, k + 8)
    Q, _ = np.linalg.qr(A @ rng.standard_normal((n_cols, p)))
    prev = None
    residual = np.inf
    for _ in range(max_iter):
        Q, _ = np.linalg.qr(A.T @ Q)
        Q, _ = np.linalg.qr(A @ Q)
        B = Q.T @ A
        Ub, s, _ = np.linalg.svd(B, full_matrices=False)
        if prev is not None:
            scale = max(float(s[0]), 1e-30)
            residual = float(np.max(np.abs(s[:k] - prev[:k]))) / scale
            if residual < tol:
                return (Q @ Ub)[:, :k], s[:k].copy()
        prev = s
    raise ConvergenceError("truncated SVD subspace iteration hit max_iter", residual)


@dataclass
class DenseEmbeddingTable:
    """Id-indexed embedding rows shared by the count and neural backends."""

    vectors: np.ndarray  # |V| x d

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ValueError("embedding table must be 2-D")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("embedding table contains NaN or Inf")

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def row(self, token_id: int) -> np.ndarray:
        if not 0 <= token_id < self.size:
            raise KeyError(f"token id {token_id} outside [0, {self.size})")
        return self.vectors[token_id]


def count_word_vector(table: DenseEmbeddingTable, token_id: int) -> np.ndarray:
    """Embedding row of one word; KeyError for ids outside the table."""
    return table.row(token_id)


def build_count_embeddings(
    sentences: Sequence[SentenceRecord],
    vocab: Vocabulary,
    config: CountEmbeddingConfig,
) -> DenseEmbeddingTable:
    """Full count pipeline: co-occurrence, optional cap, normalize, SVD."""
    matrix = build_cooccurrence(sentences, len(vocab), config.window_size)
    if config.count_threshold is not None:
        matrix = apply_count_threshold(matrix, config.count_threshold)
    normalized = normalize(matrix, config.normalization)
    rank = min(config.svd_rank, len(vocab))
    U, S = truncated_svd(normalized, rank, seed=config.seed)
    return DenseEmbeddingTable(U * S)
