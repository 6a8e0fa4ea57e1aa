"""Domain adaptation for the toy encoder.

Three training loops share the encoder's hand-written backward pass:

* masked-token pretraining (cross-entropy at masked positions only),
* supervised fine-tuning with the multiple-negatives-ranking loss, where
  every other answer in a batch serves as an in-batch negative,
* the fully unsupervised generative-pseudo-labeling pipeline: generate
  queries per paragraph, mine hard negatives by dense retrieval, label
  margins with a frozen cross-scorer, then distill those margins into the
  encoder with a squared-error loss on predicted cosine margins.

The sequence-to-sequence query generator and the cross-encoder teacher of
the published recipe are abstracted behind small interfaces with
deterministic defaults (TF-IDF keyword extraction; a frozen reference
encoder scored by cosine), so the whole pipeline runs without any
pretrained model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .attention import (
    EncoderGradients,
    EncoderParams,
    backward,
    forward,
    sgd_step,
    softmax_rows,
)
from .corpus import MaskedBatch, Vocabulary, tokenize
from .errors import EmptyCorpusError, NumericalError

TokenIds = tuple[int, ...]

DEFAULT_STOPWORDS = frozenset(
    """a an the and or but if then than that this these those is are was were be
    been being to of in on at by for with from as it its not no may must shall
    should can could will would do does did done has have had having he she
    they them their we us our you your i me my which who whom whose what when
    where how why all any each other such only own same so too very also into
    over under between through during before after above below up down out off
    again further once here there""".split()
)


@dataclass
class TrainConfig:
    """Shared knobs for the adaptation loops; file format is key=value."""

    epochs: int = 10
    learning_rate: float = 0.1
    batch_k: int = 4       # K pairs per MNR batch
    m_negatives: int = 4   # M mined negatives per query
    n_queries: int = 3
    temperature: float = 20.0
    seed: int = 0

    _FILE_KEYS = {
        "epochs": ("epochs", int),
        "lr": ("learning_rate", float),
        "K": ("batch_k", int),
        "M": ("m_negatives", int),
        "n_queries": ("n_queries", int),
        "temperature": ("temperature", float),
        "seed": ("seed", int),
    }

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        config = cls()
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{line_no}: expected key=value")
                key, value = (part.strip() for part in line.split("=", 1))
                if key not in cls._FILE_KEYS:
                    raise ValueError(f"{path}:{line_no}: unknown key {key!r}")
                attr, cast = cls._FILE_KEYS[key]
                setattr(config, attr, cast(value))
        return config


def text_to_ids(text: str, vocab: Vocabulary) -> TokenIds:
    return vocab.encode(tokenize(text))


# ---------------------------------------------------------------------------
# Step 1: masked-token pretraining
# ---------------------------------------------------------------------------

def mlm_step(params: EncoderParams, batch: MaskedBatch) -> tuple[float, EncoderGradients]:
    """Cross-entropy over the vocabulary projection at masked positions."""
    cache = forward(params, batch.masked)
    positions = np.asarray(batch.positions, dtype=np.intp)
    targets = np.asarray([batch.original[p] for p in batch.positions], dtype=np.intp)
    logits = cache.xtilde[positions] @ params.vocab_proj  # (n_mask, V)
    probs = softmax_rows(logits)
    n_mask = len(positions)
    loss = float(-np.mean(np.log(probs[np.arange(n_mask), targets] + 1e-300)))

    d_logits = probs.copy()
    d_logits[np.arange(n_mask), targets] -= 1.0
    d_logits /= n_mask
    d_xtilde = np.zeros_like(cache.xtilde)
    d_xtilde[positions] = d_logits @ params.vocab_proj.T
    grads = backward(params, cache, d_xtilde=d_xtilde)
    grads.vocab_proj[:] = cache.xtilde[positions].T @ d_logits
    return loss, grads


def mlm_pretrain(
    params: EncoderParams,
    batches: Sequence[MaskedBatch],
    config: TrainConfig,
) -> tuple[EncoderParams, list[float]]:
    """SGD over masked batches; returns new params and per-epoch mean losses.

    The input params are not mutated; zero epochs returns an identical copy.

    Raises:
        NumericalError: A batch produced a NaN loss (named in the message).
    """
    params = params.copy()
    epoch_losses: list[float] = []
    for epoch in range(config.epochs):
        total = 0.0
        for batch_no, batch in enumerate(batches):
            try:
                loss, grads = mlm_step(params, batch)
            except NumericalError as exc:
                raise NumericalError(
                    f"masked-token training failed at epoch {epoch}, "
                    f"batch {batch_no}: {exc}"
                ) from exc
            if not np.isfinite(loss):
                raise NumericalError(
                    f"masked-token loss is NaN at epoch {epoch}, batch {batch_no}"
                )
            sgd_step(params, grads, config.learning_rate)
            total += loss
        epoch_losses.append(total / max(len(batches), 1))
    return params, epoch_losses


# ---------------------------------------------------------------------------
# Step 2 (supervised): multiple-negatives-ranking fine-tuning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PairBatch:
    """K (query, answer) sentences; answers j != i act as negatives for i."""

    queries: tuple[TokenIds, ...]
    answers: tuple[TokenIds, ...]

    def __post_init__(self):
        if len(self.queries) != len(self.answers):
            raise ValueError("queries and answers must align")
        if len(self.queries) < 2:
            raise ValueError("MNR needs K >= 2 pairs for in-batch negatives")
        if len(set(self.queries)) != len(self.queries):
            raise ValueError("duplicate queries within a batch")

    @property
    def k(self) -> int:
        return len(self.queries)


def mnr_loss(
    params: EncoderParams, batch: PairBatch, temperature: float = 20.0
) -> tuple[float, EncoderGradients]:
    """Softmax cross-entropy over scaled in-batch cosine scores.

    Scores are cosine similarities of the encoded pair scaled by
    ``temperature`` (raw cosines in [-1, 1] would make the softmax nearly
    flat).  Loss is ``-1/K sum_i log softmax_row_i[i]``; with all scores
    equal it is exactly ``log K``.
    """
    k = batch.k
    query_caches = [forward(params, q) for q in batch.queries]
    answer_caches = [forward(params, a) for a in batch.answers]
    X = np.vstack([c.sentence for c in query_caches])   # (K, d_e) unit rows
    Y = np.vstack([c.sentence for c in answer_caches])
    scores = temperature * (X @ Y.T)
    probs = softmax_rows(scores)
    diag = np.arange(k)
    loss = float(-np.mean(np.log(probs[diag, diag] + 1e-300)))

    d_scores = probs.copy()
    d_scores[diag, diag] -= 1.0
    d_scores *= temperature / k
    dX = d_scores @ Y
    dY = d_scores.T @ X

    grads = EncoderGradients.zeros_like(params)
    for i in range(k):
        grads.add_(backward(params, query_caches[i], d_sentence=dX[i]))
        grads.add_(backward(params, answer_caches[i], d_sentence=dY[i]))
    return loss, grads


def _compose_batches(
    pairs: Sequence[tuple[TokenIds, TokenIds]], order: np.ndarray, batch_k: int
) -> list[PairBatch]:
    """Fill batches of size batch_k in shuffled order, never placing two
    identical queries in one batch; batches left with fewer than 2 pairs are
    dropped (no in-batch negative exists for them)."""
    open_batches: list[list[tuple[TokenIds, TokenIds]]] = []
    for idx in order:
        query, answer = pairs[idx]
        for batch in open_batches:
            if len(batch) < batch_k and all(q != query for q, _ in batch):
                batch.append((query, answer))
                break
        else:
            open_batches.append([(query, answer)])
    return [
        PairBatch(tuple(q for q, _ in b), tuple(a for _, a in b))
        for b in open_batches
        if len(b) >= 2
    ]


def fine_tune_mnr(
    params: EncoderParams,
    pairs: Sequence[tuple[TokenIds, TokenIds]],
    config: TrainConfig,
) -> tuple[EncoderParams, list[float]]:
    """MNR fine-tuning over (query, answer) token-id pairs.

    Pairs are reshuffled every epoch with the run seed and grouped into
    batches of ``config.batch_k``.  Deterministic for fixed seed; the input
    params are not mutated.

    Raises:
        ValueError: Fewer than 2 pairs.
        NumericalError: NaN epoch loss.
    """
    if len(pairs) < 2:
        raise ValueError("MNR fine-tuning needs at least 2 pairs")
    params = params.copy()
    rng = np.random.default_rng(config.seed)
    epoch_losses: list[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(pairs))
        batches = _compose_batches(pairs, order, config.batch_k)
        total = 0.0
        for batch in batches:
            loss, grads = mnr_loss(params, batch, config.temperature)
            sgd_step(params, grads, config.learning_rate)
            total += loss
        mean_loss = total / max(len(batches), 1)
        if not np.isfinite(mean_loss):
            raise NumericalError(f"MNR loss is NaN at epoch {epoch}")
        epoch_losses.append(mean_loss)
    return params, epoch_losses


def encode_text_pairs(
    pairs: Sequence[tuple[str, str]], vocab: Vocabulary
) -> list[tuple[TokenIds, TokenIds]]:
    """Tokenize (query text, answer text) pairs, dropping token-less sides."""
    encoded = []
    for query, answer in pairs:
        q_ids = text_to_ids(query, vocab)
        a_ids = text_to_ids(answer, vocab)
        if q_ids and a_ids:
            encoded.append((q_ids, a_ids))
    return encoded


# ---------------------------------------------------------------------------
# Unsupervised pipeline: query generation, negative mining, pseudo labels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GeneratedQuery:
    query: str
    positive: str
    generator_id: str

    def __post_init__(self):
        if not self.query:
            raise ValueError("generated query is empty")
        if self.query == self.positive:
            raise ValueError("generated query equals its source paragraph")


@dataclass(frozen=True)
class PseudoLabeledTriplet:
    query: str
    positive: str
    negative: str
    margin: float

    def __post_init__(self):
        if not np.isfinite(self.margin):
            raise ValueError("margin must be finite")


class QueryGenerator(Protocol):
    generator_id: str

    def generate(self, paragraph: str, n_queries: int) -> list[str]:
        ...


class CrossScorer(Protocol):
    def score(self, query: str, passage: str) -> float:
        ...


class TfidfQueryGenerator:
    """Deterministic extractive generator: top TF-IDF keyword combinations.

    Content words of the paragraph are ranked by tf-idf against the fitted
    corpus; queries are 3-to-5-word subsets of the top-ranked words,
    enumerated in a fixed order.  Paragraphs with fewer than 3 content
    tokens collapse to a single degenerate query: the paragraph's rarest
    token.
    """

    generator_id = "tfidf-extractive"

    def __init__(
        self,
        corpus_paragraphs: Sequence[str],
        seed: int = 0,
        stopwords: frozenset[str] = DEFAULT_STOPWORDS,
    ):
        self.seed = seed
        self.stopwords = stopwords
        self.n_docs = len(corpus_paragraphs)
        self.doc_freq: dict[str, int] = {}
        for paragraph in corpus_paragraphs:
            for token in set(tokenize(paragraph)):
                self.doc_freq[token] = self.doc_freq.get(token, 0) + 1

    def _idf(self, token: str) -> float:
        return float(np.log((1 + self.n_docs) / (1 + self.doc_freq.get(token, 0))) + 1.0)

    def generate(self, paragraph: str, n_queries: int) -> list[str]:
        if n_queries < 1:
            raise ValueError("n_queries must be >= 1")
        tokens = tokenize(paragraph)
        if not tokens:
            raise ValueError("cannot generate queries for an empty paragraph")
        content = [t for t in tokens if t not in self.stopwords]
        counts: dict[str, int] = {}
        for token in content:
            counts[token] = counts.get(token, 0) + 1
        if len(counts) < 3:
            pool = counts or {t: 1 for t in tokens}
            rarest = min(pool, key=lambda t: (self.doc_freq.get(t, 0), t))
            return [rarest]

        ranked = sorted(counts, key=lambda t: (-counts[t] * self._idf(t), t))
        candidates = ranked[:10]
        queries: list[str] = []
        for size in (3, 4, 5, 2, 1):
            if size > len(candidates):
                continue
            for combo in combinations(candidates, size):
                query = " ".join(combo)
                if query != paragraph and query not in queries:
                    queries.append(query)
                    if len(queries) == n_queries:
                        return queries
        return queries


def generate_queries(
    generator: QueryGenerator, paragraph: str, n_queries: int
) -> list[GeneratedQuery]:
    """Positive (query, paragraph) pairs from the generator, validated.

    Raises:
        ValueError: Duplicates from the generator, or no usable query (a
        degenerate paragraph whose only extractable query is itself).
    """
    raw = generator.generate(paragraph, n_queries)
    if len(set(raw)) != len(raw):
        raise ValueError(f"generator {generator.generator_id} returned duplicates")
    usable = [q for q in raw if q and q != paragraph]
    if not usable:
        raise ValueError(f"no usable query for degenerate paragraph {paragraph[:40]!r}")
    return [GeneratedQuery(q, paragraph, generator.generator_id) for q in usable]


class EncoderCrossScorer:
    """Default cross-scorer: cosine similarity under a frozen encoder.

    Use an encoder distinct from the one being trained (different seed) so
    the teacher/student asymmetry of pseudo-labeling is preserved.
    """

    def __init__(self, params: EncoderParams, vocab: Vocabulary):
        self.params = params
        self.vocab = vocab
        self._cache: dict[str, np.ndarray] = {}

    def _encode(self, text: str) -> np.ndarray:
        if text not in self._cache:
            ids = text_to_ids(text, self.vocab)
            if not ids:
                raise ValueError(f"cannot score token-less text: {text!r}")
            self._cache[text] = forward(self.params, ids).sentence
        return self._cache[text]

    def score(self, query: str, passage: str) -> float:
        return float(self._encode(query) @ self._encode(passage))


def mine_negatives(
    paragraphs: Sequence[str],
    query: str,
    positive_index: int,
    m_negatives: int,
    params: EncoderParams,
    vocab: Vocabulary,
) -> list[int]:
    """Dense retrieval of the M hardest negatives for one query.

    Every paragraph except the positive one is embedded with the given
    encoder and ranked by cosine against the embedded query; the top M
    indices come back in descending-similarity order, ties broken by index.
    A textual duplicate of the positive paragraph is a legitimate (if noisy)
    negative and will rank first.

    Raises:
        ValueError: M exceeds the number of available negatives.
    """
    available = len(paragraphs) - 1
    if m_negatives > available:
        raise ValueError(f"M={m_negatives} exceeds {available} available negatives")
    query_vec = forward(params, _require_ids(query, vocab)).sentence
    scored: list[tuple[float, int]] = []
    for idx, paragraph in enumerate(paragraphs):
        if idx == positive_index:
            continue
        vec = forward(params, _require_ids(paragraph, vocab)).sentence
        scored.append((float(query_vec @ vec), idx))
    scored.sort(key=lambda pair: (-pair[0], pair[1]))
    return [idx for _, idx in scored[:m_negatives]]


def _require_ids(text: str, vocab: Vocabulary) -> TokenIds:
    ids = text_to_ids(text, vocab)
    if not ids:
        raise ValueError(f"text has no tokens: {text!r}")
    return ids


def pseudo_label(
    scorer: CrossScorer, query: str, positive: str, negatives: Sequence[str]
) -> list[PseudoLabeledTriplet]:
    """margin_i = scorer(Q, P+) - scorer(Q, P-_i) for every mined negative."""
    base = scorer.score(query, positive)
    return [
        PseudoLabeledTriplet(query, positive, neg, base - scorer.score(query, neg))
        for neg in negatives
    ]


# ---------------------------------------------------------------------------
# Step 4: margin distillation training
# ---------------------------------------------------------------------------

def margin_mse_step(
    params: EncoderParams,
    query_ids: TokenIds,
    positive_ids: TokenIds,
    negative_ids: TokenIds,
    target_margin: float,
) -> tuple[float, EncoderGradients]:
    """Squared error between the labeled margin and the predicted cosine
    margin cos(Q, P+) - cos(Q, P-), with gradients for all encoder params."""
    cache_q = forward(params, query_ids)
    cache_p = forward(params, positive_ids)
    cache_n = forward(params, negative_ids)
    predicted = float(
        cache_q.sentence @ cache_p.sentence - cache_q.sentence @ cache_n.sentence
    )
    error = predicted - target_margin
    loss = error * error
    d_pred = 2.0 * error
    grads = backward(
        params, cache_q, d_sentence=d_pred * (cache_p.sentence - cache_n.sentence)
    )
    grads.add_(backward(params, cache_p, d_sentence=d_pred * cache_q.sentence))
    grads.add_(backward(params, cache_n, d_sentence=-d_pred * cache_q.sentence))
    return loss, grads


def gpl_train(
    params: EncoderParams,
    triplets: Sequence[PseudoLabeledTriplet],
    vocab: Vocabulary,
    config: TrainConfig,
) -> tuple[EncoderParams, list[float]]:
    """SGD over pseudo-labeled triplets, reshuffled per epoch with the seed.

    Raises:
        ValueError: No triplets.
        NumericalError: NaN epoch loss.
    """
    if not triplets:
        raise ValueError("no triplets to train on")
    params = params.copy()
    encoded = [
        (
            _require_ids(t.query, vocab),
            _require_ids(t.positive, vocab),
            _require_ids(t.negative, vocab),
            t.margin,
        )
        for t in triplets
    ]
    rng = np.random.default_rng(config.seed)
    epoch_losses: list[float] = []
    for epoch in range(config.epochs):
        total = 0.0
        for idx in rng.permutation(len(encoded)):
            q_ids, p_ids, n_ids, margin = encoded[idx]
            loss, grads = margin_mse_step(params, q_ids, p_ids, n_ids, margin)
            sgd_step(params, grads, config.learning_rate)
            total += loss
        mean_loss = total / len(encoded)
        if not np.isfinite(mean_loss):
            raise NumericalError(f"margin-MSE loss is NaN at epoch {epoch}")
        epoch_losses.append(mean_loss)
    return params, epoch_losses


@dataclass
class GplResult:
    params: EncoderParams
    triplets: list[PseudoLabeledTriplet]
    epoch_losses: list[float]


def gpl_pipeline(
    paragraphs: Sequence[str],
    generator: QueryGenerator,
    scorer: CrossScorer,
    params: EncoderParams,
    vocab: Vocabulary,
    config: TrainConfig,
) -> GplResult:
    """Chain the four unsupervised steps on a paragraph corpus.

    Queries are generated per paragraph, negatives mined with the starting
    encoder, margins labeled by the cross-scorer, and the encoder trained on
    the resulting triplets.  With a generator that honors ``n_queries`` the
    triplet count is exactly ``len(paragraphs) * n_queries * m_negatives``.

    Raises:
        EmptyCorpusError: No paragraphs.
    """
    if not paragraphs:
        raise EmptyCorpusError("GPL pipeline needs a non-empty paragraph corpus")
    triplets: list[PseudoLabeledTriplet] = []
    for positive_index, paragraph in enumerate(paragraphs):
        for generated in generate_queries(generator, paragraph, config.n_queries):
            negative_ids = mine_negatives(
                paragraphs, generated.query, positive_index,
                config.m_negatives, params, vocab,
            )
            triplets.extend(
                pseudo_label(
                    scorer,
                    generated.query,
                    paragraph,
                    [paragraphs[i] for i in negative_ids],
                )
            )
    trained, losses = gpl_train(params, triplets, vocab, config)
    return GplResult(trained, triplets, losses)


def triplet_rows(triplets: Sequence[PseudoLabeledTriplet]) -> list[dict]:
    """JSON-lines rows mirroring the generated-training-data sample layout."""
    return [
        {
            "query": t.query,
            "positive": t.positive,
            "negative": t.negative,
            "margin": round(t.margin, 6),
        }
        for t in triplets
    ]
