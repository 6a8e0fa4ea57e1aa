"""Skip-gram and CBOW word embeddings trained with negative sampling.

The trainable state is two tables: an input table for center words and an
output table for context words.  The published convention applies for the
final embedding of a word: the average of its input and output rows.
Training is plain SGD on the negative-sampling objective

    loss = -log sigma(v_out[c] . v_in[w]) - sum_j log sigma(-v_out[n_j] . v_in[w])

with negatives drawn from the unigram distribution raised to the 3/4 power.
Everything is deterministic for a fixed seed; the full softmax is kept only
as a reference for tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from .corpus import SentenceRecord, Vocabulary
from .count_embed import DenseEmbeddingTable
from .errors import EmptyCorpusError, NumericalError

NOISE_EXPONENT = 0.75


# ---------------------------------------------------------------------------
# Context extraction modes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SkipGramContext:
    """All (center, context) pairs within a symmetric window of size c."""

    c: int


@dataclass(frozen=True)
class CbowContext:
    """(context window, center) pairs for continuous-bag-of-words."""

    c: int


@dataclass(frozen=True)
class SkipNGram:
    """k-skip-n-grams: n-token subsequences skipping at most k tokens."""

    k: int
    n: int


ExtractionMode = Union[SkipGramContext, CbowContext, SkipNGram]


@dataclass(frozen=True)
class TrainingPair:
    center: int
    context: int


def skipgram_pairs(tokens: Sequence[int], c: int) -> list[TrainingPair]:
    """Enumerate (w_t, w_{t+j}) for 0 < |j| <= c, staying inside the sentence."""
    if c < 1:
        raise ValueError("context size c must be >= 1")
    length = len(tokens)
    pairs = []
    for t in range(length):
        for j in range(-c, c + 1):
            if j == 0:
                continue
            u = t + j
            if 0 <= u < length:
                pairs.append(TrainingPair(tokens[t], tokens[u]))
    return pairs


def cbow_pairs(tokens: Sequence[int], c: int) -> list[tuple[tuple[int, ...], int]]:
    """Enumerate (context tuple, center) pairs over a symmetric window."""
    if c < 1:
        raise ValueError("context size c must be >= 1")
    length = len(tokens)
    out = []
    for t in range(length):
        context = tuple(
            tokens[t + j]
            for j in range(-c, c + 1)
            if j != 0 and 0 <= t + j < length
        )
        if context:
            out.append((context, tokens[t]))
    return out


def k_skip_n_grams(tokens: Sequence[int], k: int, n: int) -> list[tuple[int, ...]]:
    """All n-token subsequences whose total skipped gap is at most k.

    The span constraint is ``last - first <= k + n - 1``; output follows
    reading order (lexicographic in the index tuples).  Plain n-grams are
    the k=0 case, so every n-gram also appears in the k>0 output.
    """
    if n < 1 or k < 0:
        raise ValueError("need n >= 1 and k >= 0")
    from itertools import combinations

    length = len(tokens)
    grams = []
    for first in range(length - n + 1):
        last_bound = min(length, first + k + n)
        for rest in combinations(range(first + 1, last_bound), n - 1):
            grams.append(tuple(tokens[i] for i in (first, *rest)))
    return grams


def extract_pairs(tokens: Sequence[int], mode: ExtractionMode):
    """Dispatch to the extraction routine selected by ``mode``."""
    if isinstance(mode, SkipGramContext):
        return skipgram_pairs(tokens, mode.c)
    if isinstance(mode, CbowContext):
        return cbow_pairs(tokens, mode.c)
    if isinstance(mode, SkipNGram):
        return k_skip_n_grams(tokens, mode.k, mode.n)
    raise TypeError(f"unknown extraction mode: {mode!r}")


# ---------------------------------------------------------------------------
# Noise distribution for negative sampling
# ---------------------------------------------------------------------------

@dataclass
class NoiseDistribution:
    """Unigram distribution raised to an exponent, with inverse-CDF sampling."""

    probabilities: np.ndarray
    cumulative: np.ndarray
    exponent: float
    normalizer: float

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        draws = rng.random(size)
        ids = np.searchsorted(self.cumulative, draws, side="right")
        return np.minimum(ids, len(self.probabilities) - 1)


def noise_distribution(vocab: Vocabulary, exponent: float = NOISE_EXPONENT) -> NoiseDistribution:
    """P_n(w) proportional to frequency(w) ** exponent.

    Zero-frequency tokens (the reserved mask id, typically) get zero
    probability.  Raises ``EmptyCorpusError`` when no token has a positive
    frequency.
    """
    freqs = vocab.frequencies.astype(np.float64)
    if len(freqs) == 0 or freqs.sum() == 0:
        raise EmptyCorpusError("vocabulary has no occurrences to sample from")
    weights = np.power(freqs, exponent, out=np.zeros_like(freqs), where=freqs > 0)
    normalizer = float(weights.sum())
    probabilities = weights / normalizer
    return NoiseDistribution(probabilities, np.cumsum(probabilities), exponent, normalizer)


# ---------------------------------------------------------------------------
# Model, objective, training
# ---------------------------------------------------------------------------

@dataclass
class SkipGramModel:
    input_vectors: np.ndarray  # |V| x d, center-word table
    output_vectors: np.ndarray  # |V| x d, context-word table

    @property
    def dim(self) -> int:
        return self.input_vectors.shape[1]

    def embedding(self, token_id: int) -> np.ndarray:
        return (self.input_vectors[token_id] + self.output_vectors[token_id]) / 2.0

    def embedding_table(self) -> DenseEmbeddingTable:
        return DenseEmbeddingTable((self.input_vectors + self.output_vectors) / 2.0)


@dataclass
class SgdConfig:
    dim: int = 32
    learning_rate: float = 0.05
    linear_decay: bool = True
    lr_floor_ratio: float = 1e-4
    epochs: int = 10
    k_negatives: int = 5  # typical range [5, 20] on small data, [2, 5] on large
    window: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.k_negatives < 1:
            raise ValueError("k_negatives must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


def _log_sigmoid(x: float) -> float:
    # -log(1 + exp(-x)), stable for large |x|
    return -float(np.logaddexp(0.0, -x))


def _sigmoid(x: float) -> float:
    return 0.5 * (1.0 + float(np.tanh(0.5 * x)))


GradientMap = dict[tuple[str, int], np.ndarray]


def negative_sampling_objective(
    model: SkipGramModel, pair: TrainingPair, negatives: Sequence[int]
) -> tuple[float, GradientMap]:
    """Loss and sparse gradients of one (center, context, negatives) step.

    Gradients touch only the center row of the input table and the context
    plus negative rows of the output table; rows drawn more than once
    accumulate.

    Raises:
        NumericalError: A dot product came out NaN (poisoned parameters).
    """
    v_in = model.input_vectors[pair.center]
    v_out = model.output_vectors[pair.context]
    s_pos = float(v_in @ v_out)
    if not np.isfinite(s_pos):
        raise NumericalError("NaN in positive dot product")

    loss = -_log_sigmoid(s_pos)
    grads: GradientMap = {}

    def _accumulate(key: tuple[str, int], value: np.ndarray) -> None:
        if key in grads:
            grads[key] = grads[key] + value
        else:
            grads[key] = value

    g_pos = _sigmoid(s_pos) - 1.0
    d_in = g_pos * v_out
    _accumulate(("output", pair.context), g_pos * v_in)

    for neg in negatives:
        v_neg = model.output_vectors[neg]
        s_neg = float(v_in @ v_neg)
        if not np.isfinite(s_neg):
            raise NumericalError("NaN in negative dot product")
        loss -= _log_sigmoid(-s_neg)
        g_neg = _sigmoid(s_neg)
        d_in = d_in + g_neg * v_neg
        _accumulate(("output", int(neg)), g_neg * v_in)

    _accumulate(("input", pair.center), d_in)
    return loss, grads


def full_softmax_probability(model: SkipGramModel, w_out: int, w_in: int) -> float:
    """Reference softmax P(w_out | w_in) over the whole vocabulary.

    Exact but O(|V|); used only by tests as an oracle.
    """
    return float(full_softmax_distribution(model, w_in)[w_out])


def full_softmax_distribution(model: SkipGramModel, w_in: int) -> np.ndarray:
    logits = model.output_vectors @ model.input_vectors[w_in]
    logits = logits - logits.max()
    exp = np.exp(logits)
    return exp / exp.sum()


def initialize_model(vocab_size: int, dim: int, rng: np.random.Generator) -> SkipGramModel:
    """Input rows uniform in [-0.5/d, 0.5/d]; output rows zero."""
    bound = 0.5 / dim
    input_vectors = rng.uniform(-bound, bound, size=(vocab_size, dim))
    return SkipGramModel(input_vectors, np.zeros((vocab_size, dim)))


def train(
    sentences: Sequence[SentenceRecord],
    vocab: Vocabulary,
    config: SgdConfig,
    progress: Callable[[int, float], None] | None = None,
) -> tuple[SkipGramModel, list[float]]:
    """SGD over all skip-gram pairs of the corpus, epoch by epoch.

    The learning rate decays linearly over the total number of updates with
    a small floor.  Fully deterministic for a fixed seed (initialization and
    negative draws come from one generator consumed in corpus order).

    Args:
        sentences: Encoded sentence records (``tokens`` filled in).
        vocab: Vocabulary the token ids refer to.
        config: Hyperparameters, including the seed.
        progress: Optional ``(epoch, mean_loss)`` callback per epoch.

    Returns:
        The trained model and the per-epoch mean losses.

    Raises:
        NumericalError: An epoch's mean loss came out NaN, naming the epoch.
    """
    rng = np.random.default_rng(config.seed)
    model = initialize_model(len(vocab), config.dim, rng)
    if config.epochs == 0:
        return model, []

    noise = noise_distribution(vocab)
    per_sentence = [skipgram_pairs(s.tokens, config.window) for s in sentences]
    pairs_per_epoch = sum(len(p) for p in per_sentence)
    total_steps = max(config.epochs * pairs_per_epoch, 1)

    epoch_losses: list[float] = []
    step = 0
    for epoch in range(config.epochs):
        total = 0.0
        for sentence_pairs in per_sentence:
            for pair in sentence_pairs:
                lr = config.learning_rate
                if config.linear_decay:
                    lr *= max(config.lr_floor_ratio, 1.0 - step / total_steps)
                negatives = noise.sample(rng, config.k_negatives)
                try:
                    loss, grads = negative_sampling_objective(model, pair, negatives)
                except NumericalError as exc:
                    raise NumericalError(
                        f"training diverged at epoch {epoch}: {exc}"
                    ) from exc
                for (table, row), grad in grads.items():
                    if table == "input":
                        model.input_vectors[row] -= lr * grad
                    else:
                        model.output_vectors[row] -= lr * grad
                total += loss
                step += 1
        mean_loss = total / pairs_per_epoch if pairs_per_epoch else 0.0
        if not np.isfinite(mean_loss):
            raise NumericalError(f"training diverged at epoch {epoch}")
        epoch_losses.append(mean_loss)
        if progress is not None:
            progress(epoch, mean_loss)
    return model, epoch_losses
