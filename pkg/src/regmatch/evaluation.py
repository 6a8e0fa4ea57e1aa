"""Ensemble pseudo-dataset construction and the two benchmark scores.

A pool of N sentence-embedding models votes on (rule, policy) pairs: a
model votes for a pair when its cosine reaches the threshold, and a pair
survives when its vote count exceeds sqrt(N) (shot-noise reasoning: one
sigma above uncorrelated-model noise).  The surviving pairs split into
fine-tuning and validation sets.

Two scores rate a model on a validation set of aligned (R_i, P_i) pairs:
the mean cosine margin between matching and random pairs, and the fraction
of rules whose argmax policy is the labeled one.  Both are benchmarks of
relative improvement, not absolute match quality.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .attention import EncoderParams, forward
from .corpus import Vocabulary, tokenize
from .vector_io import load_vectors, read_jsonl, write_jsonl

Key = tuple[str, int]


class ModelHandle(Protocol):
    """Anything that can embed a sentence into a fixed-dimension vector."""

    model_id: str

    def encode(self, text: str) -> np.ndarray:
        ...


class HashProjectionModel:
    """Mock embedding model: per-token Gaussian vectors seeded by a stable
    hash of (model id, token), summed over the sentence.

    Lets the ensemble machinery run and be tested without any pretrained
    model; distinct ids give independent models.
    """

    def __init__(self, model_id: str, dim: int = 32):
        self.model_id = model_id
        self.dim = dim
        self._token_cache: dict[str, np.ndarray] = {}

    def _token_vector(self, token: str) -> np.ndarray:
        cached = self._token_cache.get(token)
        if cached is None:
            digest = hashlib.sha256(f"{self.model_id}\x00{token}".encode()).digest()
            seed = int.from_bytes(digest[:8], "little")
            cached = np.random.default_rng(seed).standard_normal(self.dim)
            self._token_cache[token] = cached
        return cached

    def encode(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        if not tokens:
            raise ValueError(f"cannot encode token-less text: {text!r}")
        return np.sum([self._token_vector(t) for t in tokens], axis=0)


class EncoderModel:
    """ModelHandle over trained encoder params and their vocabulary."""

    def __init__(self, model_id: str, params: EncoderParams, vocab: Vocabulary):
        self.model_id = model_id
        self.params = params
        self.vocab = vocab

    def encode(self, text: str) -> np.ndarray:
        ids = self.vocab.encode(tokenize(text))
        if not ids:
            raise ValueError(f"cannot encode token-less text: {text!r}")
        return forward(self.params, ids).sentence


class WordVectorModel:
    """ModelHandle over an imported word-vector table (mean of token rows)."""

    def __init__(self, model_id: str, labels: Sequence[str], matrix: np.ndarray):
        self.model_id = model_id
        self.vectors = {label: np.asarray(row, dtype=np.float64)
                        for label, row in zip(labels, matrix)}

    @classmethod
    def from_file(cls, path: str | Path, model_id: str | None = None) -> "WordVectorModel":
        labels, matrix = load_vectors(path)
        return cls(model_id or str(path), labels, matrix)

    def encode(self, text: str) -> np.ndarray:
        rows = [self.vectors[t] for t in tokenize(text) if t in self.vectors]
        if not rows:
            raise ValueError(f"no known tokens in {text!r}")
        return np.mean(rows, axis=0)


# ---------------------------------------------------------------------------
# Ensemble voting
# ---------------------------------------------------------------------------

@dataclass
class EnsembleVote:
    """Vote counts per (rule, policy) pair plus the per-model score grids."""

    rule_keys: list[Key]
    policy_keys: list[Key]
    votes: np.ndarray  # (n_rules, n_policies) int
    model_scores: dict[str, np.ndarray]

    def vote_count(self, rule_key: Key, policy_key: Key) -> int:
        i = self.rule_keys.index(rule_key)
        j = self.policy_keys.index(policy_key)
        return int(self.votes[i, j])


@dataclass(frozen=True)
class ValidationPair:
    rule_key: Key
    rule_text: str
    policy_key: Key
    policy_text: str
    votes: int | None = None


def default_vote_cut(n_models: int) -> int:
    """Smallest integer vote count strictly above sqrt(N), clamped to [1, N].

    N=10 gives 4 (4 > sqrt(10) > 3); the degenerate N=1 ensemble clamps to 1
    so a single model can still produce pairs.
    """
    if n_models < 1:
        raise ValueError("need at least one model")
    return min(n_models, math.isqrt(n_models) + 1)


def _encode_all(model: ModelHandle, texts: Sequence[str]) -> np.ndarray:
    rows = []
    dim: int | None = None
    for text in texts:
        vec = np.asarray(model.encode(text), dtype=np.float64)
        if vec.ndim != 1:
            raise ValueError(f"model {model.model_id} returned a non-vector output")
        if dim is None:
            dim = vec.shape[0]
        elif vec.shape[0] != dim:
            raise ValueError(
                f"model {model.model_id} returned inconsistent dimensions "
                f"({dim} then {vec.shape[0]})"
            )
        norm = np.linalg.norm(vec)
        if norm == 0.0 or not np.isfinite(norm):
            raise ValueError(f"model {model.model_id} returned a zero/non-finite vector")
        rows.append(vec / norm)
    return np.vstack(rows)


def ensemble_votes(
    models: Sequence[ModelHandle],
    rules: Sequence[tuple[Key, str]],
    policies: Sequence[tuple[Key, str]],
    tau: float = 0.7,
) -> EnsembleVote:
    """Count, for every (rule, policy) pair, the models scoring it >= tau."""
    if not models:
        raise ValueError("need at least one model")
    rule_keys = [k for k, _ in rules]
    policy_keys = [k for k, _ in policies]
    votes = np.zeros((len(rules), len(policies)), dtype=np.int64)
    model_scores: dict[str, np.ndarray] = {}
    for model in models:
        R = _encode_all(model, [t for _, t in rules])
        P = _encode_all(model, [t for _, t in policies])
        scores = R @ P.T
        model_scores[model.model_id] = scores
        votes += scores >= tau
    return EnsembleVote(rule_keys, policy_keys, votes, model_scores)


def ensemble_pseudo_label(
    models: Sequence[ModelHandle],
    rules: Sequence[tuple[Key, str]],
    policies: Sequence[tuple[Key, str]],
    tau: float = 0.7,
    vote_cut: int | None = None,
) -> list[ValidationPair]:
    """Retain the pairs enough models agree on.

    ``vote_cut`` is the minimum retained vote count; by default the smallest
    integer strictly greater than sqrt(N).  Output is sorted by
    (rule key, policy key).
    """
    vote = ensemble_votes(models, rules, policies, tau)
    cut = default_vote_cut(len(models)) if vote_cut is None else vote_cut
    if cut < 1:
        raise ValueError("vote_cut must be >= 1")
    rule_texts = dict(rules)
    policy_texts = dict(policies)
    retained = [
        ValidationPair(
            rk, rule_texts[rk], pk, policy_texts[pk], int(vote.votes[i, j])
        )
        for i, rk in enumerate(vote.rule_keys)
        for j, pk in enumerate(vote.policy_keys)
        if vote.votes[i, j] >= cut
    ]
    retained.sort(key=lambda pair: (pair.rule_key, pair.policy_key))
    return retained


def split_dataset(
    pairs: Sequence[ValidationPair], train_fraction: float = 0.8, seed: int = 0
) -> tuple[list[ValidationPair], list[ValidationPair]]:
    """Seed-deterministic shuffle split into (train, validation)."""
    if len(pairs) < 2:
        raise ValueError("need at least 2 pairs to split")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(pairs))
    n_train = min(max(round(len(pairs) * train_fraction), 1), len(pairs) - 1)
    train = [pairs[i] for i in order[:n_train]]
    validation = [pairs[i] for i in order[n_train:]]
    return train, validation


# ---------------------------------------------------------------------------
# Scores
# ---------------------------------------------------------------------------

def _unit_rows(model: ModelHandle, texts: Sequence[str]) -> np.ndarray:
    return _encode_all(model, texts)


def score1(
    model: ModelHandle,
    pairs: Sequence[ValidationPair],
    seed: int = 0,
    n_draws: int = 1,
) -> float:
    """Mean margin between the matching pair and a random non-matching one.

    For each rule i one (or ``n_draws``) random j != i is drawn with the run
    seed, and the margin cos(R_i, P_i) - cos(R_i, P_j) is averaged.
    """
    n = len(pairs)
    if n < 2:
        raise ValueError("score1 needs at least 2 pairs")
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    R = _unit_rows(model, [p.rule_text for p in pairs])
    P = _unit_rows(model, [p.policy_text for p in pairs])
    sims = R @ P.T
    rng = np.random.default_rng(seed)
    total = 0.0
    for i in range(n):
        for _ in range(n_draws):
            j = int(rng.integers(n - 1))
            if j >= i:
                j += 1
            total += sims[i, i] - sims[i, j]
    return total / (n * n_draws)


def score2(model: ModelHandle, pairs: Sequence[ValidationPair]) -> float:
    """Fraction of rules whose best-scoring policy is the labeled match.

    The argmax runs over the validation pool's policies; exact score ties
    resolve to the smallest policy key, and the indicator compares keys (so
    a duplicated policy text under the labeled key still counts).
    """
    n = len(pairs)
    if n < 2:
        raise ValueError("score2 needs at least 2 pairs")
    R = _unit_rows(model, [p.rule_text for p in pairs])
    P = _unit_rows(model, [p.policy_text for p in pairs])
    sims = R @ P.T
    correct = 0
    for i in range(n):
        best = sims[i].max()
        winner = min(pairs[j].policy_key for j in range(n) if sims[i, j] == best)
        if winner == pairs[i].policy_key:
            correct += 1
    return correct / n


def improvement_ratio(score_finetune: float, score_baseline: float) -> float:
    """(fine-tuned - baseline) / baseline.

    Raises:
        ValueError: Zero baseline.
    """
    if score_baseline == 0.0:
        raise ValueError("improvement ratio undefined for zero baseline")
    return (score_finetune - score_baseline) / score_baseline


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class ScoreReport:
    model_id: str
    score1: float
    score2: float
    n_pairs: int
    baseline: "ScoreReport | None" = None

    def improvement(self) -> dict[str, float] | None:
        if self.baseline is None:
            return None
        return {
            "score1": improvement_ratio(self.score1, self.baseline.score1),
            "score2": improvement_ratio(self.score2, self.baseline.score2),
        }

    def to_json(self) -> dict:
        payload = {
            "model": self.model_id,
            "score1": round(self.score1, 6),
            "score2": round(self.score2, 6),
            "n": self.n_pairs,
            "baseline": None,
            "improvement": None,
        }
        if self.baseline is not None:
            payload["baseline"] = {
                "model": self.baseline.model_id,
                "score1": round(self.baseline.score1, 6),
                "score2": round(self.baseline.score2, 6),
            }
            ratios = self.improvement()
            payload["improvement"] = {k: round(v, 6) for k, v in ratios.items()}
        return payload

    @classmethod
    def from_json(cls, obj: dict) -> "ScoreReport":
        baseline = None
        if obj.get("baseline"):
            b = obj["baseline"]
            baseline = cls(b["model"], b["score1"], b["score2"], obj["n"])
        return cls(obj["model"], obj["score1"], obj["score2"], obj["n"], baseline)


def evaluate_model(
    model: ModelHandle,
    pairs: Sequence[ValidationPair],
    seed: int = 0,
    baseline: ScoreReport | None = None,
) -> ScoreReport:
    return ScoreReport(
        model.model_id,
        score1(model, pairs, seed=seed),
        score2(model, pairs),
        len(pairs),
        baseline,
    )


def format_score_table(report: ScoreReport) -> str:
    """Plain-text table in the published layout: model rows, score columns."""
    width = max(
        len(report.model_id),
        len(report.baseline.model_id) if report.baseline else 0,
        len("Improvement"),
        len("Model"),
    )
    header = f"{'Model':<{width}}  Score 1  Score 2"
    lines = [header, "-" * len(header)]
    if report.baseline is not None:
        lines.append(
            f"{report.baseline.model_id:<{width}}  "
            f"{report.baseline.score1:7.2f}  {report.baseline.score2:7.2f}"
        )
    lines.append(f"{report.model_id:<{width}}  {report.score1:7.2f}  {report.score2:7.2f}")
    ratios = report.improvement()
    if ratios is not None:
        lines.append(
            f"{'Improvement':<{width}}  "
            f"{ratios['score1']:6.0%}  {ratios['score2']:6.0%}"
        )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Validation dataset file: JSON-lines {"rule_text", "policy_text", "votes"}
# ---------------------------------------------------------------------------

def write_validation_pairs(path: str | Path, pairs: Sequence[ValidationPair]) -> None:
    write_jsonl(
        path,
        [
            {"rule_text": p.rule_text, "policy_text": p.policy_text, "votes": p.votes}
            for p in pairs
        ],
    )


def read_validation_pairs(path: str | Path) -> list[ValidationPair]:
    pairs = []
    for i, row in enumerate(read_jsonl(path)):
        pairs.append(
            ValidationPair(
                ("rule", i),
                row["rule_text"],
                ("policy", i),
                row["policy_text"],
                row.get("votes"),
            )
        )
    return pairs
