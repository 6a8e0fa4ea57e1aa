"""Cosine-similarity search between rule sentences and a policy corpus.

The index is exhaustive on purpose: at the corpus sizes this pipeline
targets (tens of thousands of sentences) a brute-force scan is fast,
deterministic, and exactly matches any naive oracle.  Ties are broken by
(doc_id, seq) key so runs are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

Key = tuple[str, int]


def cosine_similarity(q: np.ndarray, p: np.ndarray) -> float:
    """Q.P / (|Q| |P|); symmetric, scale-invariant, in [-1, 1].

    Raises:
        ValueError: Either vector has zero norm.
    """
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    nq = np.linalg.norm(q)
    np_ = np.linalg.norm(p)
    if nq == 0.0 or np_ == 0.0:
        raise ValueError("cosine similarity undefined for zero vectors")
    return float(q @ p / (nq * np_))


@dataclass(frozen=True)
class MatchResult:
    rule_key: Key
    policy_key: Key
    score: float
    vote_count: int | None = None


@dataclass
class VectorIndex:
    """Unit-normalized sentence vectors with their (doc_id, seq) keys."""

    keys: list[Key]
    matrix: np.ndarray  # (n, d), rows unit norm

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.keys)


def build_index(entries: Sequence[tuple[Key, np.ndarray]]) -> VectorIndex:
    """Normalize and stack sentence vectors; keys must be unique.

    Raises:
        ValueError: Dimension mismatch, duplicate key, or zero vector.
    """
    keys: list[Key] = []
    rows: list[np.ndarray] = []
    dim: int | None = None
    seen: set[Key] = set()
    for key, vector in entries:
        vector = np.asarray(vector, dtype=np.float64)
        if vector.ndim != 1:
            raise ValueError(f"vector for {key} is not 1-D")
        if dim is None:
            dim = vector.shape[0]
        elif vector.shape[0] != dim:
            raise ValueError(
                f"dimension mismatch for {key}: got {vector.shape[0]}, expected {dim}"
            )
        if key in seen:
            raise ValueError(f"duplicate key {key}")
        norm = np.linalg.norm(vector)
        if norm == 0.0 or not np.isfinite(norm):
            raise ValueError(f"vector for {key} has zero or non-finite norm")
        seen.add(key)
        keys.append(key)
        rows.append(vector / norm)
    matrix = np.vstack(rows) if rows else np.zeros((0, dim or 0))
    return VectorIndex(keys, matrix)


def query_top_k(
    index: VectorIndex, query: np.ndarray, k: int, rule_key: Key = ("query", 0)
) -> list[MatchResult]:
    """Exhaustive top-k by cosine, descending; ties resolved by key order."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(index) == 0:
        return []
    query = np.asarray(query, dtype=np.float64)
    norm = np.linalg.norm(query)
    if norm == 0.0:
        raise ValueError("query vector has zero norm")
    scores = index.matrix @ (query / norm)
    order = sorted(range(len(index)), key=lambda i: (-scores[i], index.keys[i]))
    return [
        MatchResult(rule_key, index.keys[i], float(scores[i]))
        for i in order[: min(k, len(order))]
    ]


def threshold_match(
    index: VectorIndex,
    rules: Sequence[tuple[Key, np.ndarray]],
    tau: float = 0.7,
) -> list[MatchResult]:
    """All (rule, policy) pairs whose cosine reaches the threshold.

    The bound is closed (score >= tau).  Results are grouped per rule in
    input order, each group sorted by descending score then key.
    """
    if not -1.0 < tau < 1.0:
        raise ValueError("tau must lie in (-1, 1)")
    results: list[MatchResult] = []
    for rule_key, vector in rules:
        vector = np.asarray(vector, dtype=np.float64)
        norm = np.linalg.norm(vector)
        if norm == 0.0:
            raise ValueError(f"rule vector {rule_key} has zero norm")
        if len(index) == 0:
            continue
        scores = index.matrix @ (vector / norm)
        hits = [i for i in range(len(index)) if scores[i] >= tau]
        hits.sort(key=lambda i: (-scores[i], index.keys[i]))
        results.extend(
            MatchResult(rule_key, index.keys[i], float(scores[i])) for i in hits
        )
    return results


def match_report_rows(matches: Sequence[MatchResult]) -> list[dict]:
    """JSON-lines rows for a match report."""
    return [
        {
            "rule_doc": m.rule_key[0],
            "rule_seq": m.rule_key[1],
            "policy_doc": m.policy_key[0],
            "policy_seq": m.policy_key[1],
            "score": round(m.score, 6),
        }
        for m in matches
    ]


def format_match_table(
    matches: Sequence[MatchResult],
    rule_texts: dict[Key, str],
    policy_texts: dict[Key, str],
    width: int = 48,
) -> str:
    """Human-readable table: rule text | policy text | score."""

    def clip(text: str) -> str:
        return text if len(text) <= width else text[: width - 3] + "..."

    header = f"{'Rule':<{width}}  {'Policy':<{width}}  Score"
    lines = [header, "-" * len(header)]
    for m in matches:
        rule = clip(rule_texts.get(m.rule_key, str(m.rule_key)))
        policy = clip(policy_texts.get(m.policy_key, str(m.policy_key)))
        lines.append(f"{rule:<{width}}  {policy:<{width}}  {m.score:6.4f}")
    return "\n".join(lines)
