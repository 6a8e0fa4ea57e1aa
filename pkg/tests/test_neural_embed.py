"""Skip-gram/CBOW pair extraction, noise distribution, objective, training."""

import numpy as np
import pytest

from conftest import encode_corpus, make_vocab
from regmatch import corpus, neural_embed
from regmatch.errors import EmptyCorpusError, NumericalError
from regmatch.neural_embed import (
    CbowContext,
    NoiseDistribution,
    SgdConfig,
    SkipGramContext,
    SkipGramModel,
    SkipNGram,
    TrainingPair,
    extract_pairs,
    full_softmax_distribution,
    full_softmax_probability,
    initialize_model,
    k_skip_n_grams,
    negative_sampling_objective,
    noise_distribution,
    skipgram_pairs,
    train,
)

SENTENCE = ["i", "hit", "the", "blue", "ball"]


class TestExtractPairs:
    def test_bigrams(self):
        grams = k_skip_n_grams(SENTENCE, k=0, n=2)
        assert grams == [
            ("i", "hit"), ("hit", "the"), ("the", "blue"), ("blue", "ball")
        ]

    def test_two_skip_bigrams(self):
        grams = set(k_skip_n_grams(SENTENCE, k=2, n=2))
        listed = {
            ("i", "hit"), ("i", "the"), ("i", "blue"),
            ("hit", "the"), ("hit", "blue"), ("hit", "ball"),
            ("the", "blue"), ("the", "ball"),
        }
        # the published enumeration, plus the trailing adjacent pair that any
        # k-skip set must contain (it is a superset of the plain bigrams)
        assert listed <= grams
        assert grams == listed | {("blue", "ball")}

    def test_skipgram_window(self):
        pairs = skipgram_pairs([10, 11, 12], c=1)
        assert pairs == [
            TrainingPair(10, 11),
            TrainingPair(11, 10), TrainingPair(11, 12),
            TrainingPair(12, 11),
        ]

    def test_single_token_sentence(self):
        assert skipgram_pairs([5], c=2) == []
        assert extract_pairs([5], CbowContext(2)) == []
        assert extract_pairs([5], SkipNGram(2, 2)) == []

    def test_cbow_contexts(self):
        out = extract_pairs([1, 2, 3], CbowContext(1))
        assert out == [((2,), 1), ((1, 3), 2), ((2,), 3)]

    def test_mode_dispatch(self):
        assert extract_pairs([1, 2], SkipGramContext(1)) == skipgram_pairs([1, 2], 1)
        with pytest.raises(TypeError):
            extract_pairs([1, 2], "bigram")

    def test_pair_count_formula(self, rng):
        # |pairs| = sum_t |{j: 0 < |j| <= c, 0 <= t+j < L}|, by brute force
        for _ in range(20):
            length = int(rng.integers(1, 15))
            c = int(rng.integers(1, 6))
            tokens = rng.integers(0, 50, size=length).tolist()
            expected = sum(
                1
                for t in range(length)
                for j in range(-c, c + 1)
                if j != 0 and 0 <= t + j < length
            )
            assert len(skipgram_pairs(tokens, c)) == expected


class TestNoiseDistribution:
    def test_three_quarter_power(self):
        vocab = make_vocab("a a a a a a a a b")
        dist = noise_distribution(vocab)
        expected_a = 8 ** 0.75 / (8 ** 0.75 + 1)
        assert dist.probabilities[vocab.lookup("a")] == pytest.approx(expected_a, abs=1e-12)
        assert dist.probabilities[vocab.lookup("b")] == pytest.approx(1 - expected_a, abs=1e-12)

    def test_uniform_frequencies_stay_uniform(self):
        vocab = make_vocab("a b c d")
        dist = noise_distribution(vocab)
        nonzero = dist.probabilities[dist.probabilities > 0]
        assert np.allclose(nonzero, 0.25)

    def test_exponent_one_is_relative_frequency(self):
        vocab = make_vocab("a a a b")
        dist = noise_distribution(vocab, exponent=1.0)
        assert dist.probabilities[vocab.lookup("a")] == pytest.approx(0.75)

    def test_probabilities_sum_to_one(self):
        vocab = make_vocab("x y z z y x q")
        dist = noise_distribution(vocab)
        assert abs(dist.probabilities.sum() - 1.0) < 1e-12
        assert dist.cumulative[-1] == pytest.approx(1.0, abs=1e-12)

    def test_empty_vocabulary_rejected(self):
        empty = corpus.Vocabulary({"<unk>": 0}, ["<unk>"], np.array([0]))
        with pytest.raises(EmptyCorpusError):
            noise_distribution(empty)

    def test_empirical_sampling_matches(self):
        vocab = make_vocab("a a a a a a b b b c")
        dist = noise_distribution(vocab)
        rng = np.random.default_rng(123)
        draws = dist.sample(rng, 1_000_000)
        counts = np.bincount(draws, minlength=len(vocab)) / len(draws)
        assert np.all(np.abs(counts - dist.probabilities) < 0.005)


def zero_model(vocab_size: int = 4, dim: int = 3) -> SkipGramModel:
    return SkipGramModel(np.zeros((vocab_size, dim)), np.zeros((vocab_size, dim)))


class TestNegativeSamplingObjective:
    def test_zero_tables_loss(self):
        model = zero_model()
        loss, _ = negative_sampling_objective(model, TrainingPair(0, 1), [2, 3, 3])
        assert loss == pytest.approx(4 * np.log(2), abs=1e-12)

    def test_only_touched_rows_have_gradients(self, rng):
        model = SkipGramModel(rng.standard_normal((6, 4)), rng.standard_normal((6, 4)))
        _, grads = negative_sampling_objective(model, TrainingPair(0, 1), [2, 2])
        assert set(grads) == {("input", 0), ("output", 1), ("output", 2)}

    def test_gradients_match_finite_differences(self, rng):
        for trial in range(100):
            model = SkipGramModel(
                rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
            )
            pair = TrainingPair(int(rng.integers(5)), int(rng.integers(5)))
            negatives = rng.integers(0, 5, size=3).tolist()

            def loss_of(m):
                return negative_sampling_objective(m, pair, negatives)[0]

            _, grads = negative_sampling_objective(model, pair, negatives)
            eps = 1e-5
            for (table, row), grad in grads.items():
                target = model.input_vectors if table == "input" else model.output_vectors
                for col in range(4):
                    original = target[row, col]
                    target[row, col] = original + eps
                    up = loss_of(model)
                    target[row, col] = original - eps
                    down = loss_of(model)
                    target[row, col] = original
                    fd = (up - down) / (2 * eps)
                    assert abs(grad[col] - fd) <= 1e-7 + 1e-6 * max(abs(grad[col]), abs(fd))

    def test_limit_loss_vanishes(self):
        model = zero_model(3, 2)
        model.input_vectors[0] = [30.0, 0.0]
        model.output_vectors[1] = [30.0, 0.0]   # strong positive alignment
        model.output_vectors[2] = [-30.0, 0.0]  # strongly repelled negative
        loss, _ = negative_sampling_objective(model, TrainingPair(0, 1), [2])
        assert loss < 1e-12

    def test_nan_rejected(self):
        model = zero_model()
        model.input_vectors[0, 0] = np.nan
        with pytest.raises(NumericalError):
            negative_sampling_objective(model, TrainingPair(0, 1), [2])


class TestFullSoftmax:
    def test_zero_tables_uniform(self):
        model = zero_model(5, 3)
        assert full_softmax_probability(model, 2, 0) == pytest.approx(0.2)

    def test_normalization(self, rng):
        model = SkipGramModel(rng.standard_normal((7, 4)), rng.standard_normal((7, 4)))
        dist = full_softmax_distribution(model, 3)
        assert abs(dist.sum() - 1.0) < 1e-10

    def test_stationary_point_expectation(self, rng):
        # with all output rows equal, the model expectation of the output
        # vector equals the target row and the input gradient vanishes
        common = rng.standard_normal(4)
        model = SkipGramModel(
            rng.standard_normal((5, 4)), np.tile(common, (5, 1))
        )
        w_in, w_out = 1, 3
        dist = full_softmax_distribution(model, w_in)
        expectation = dist @ model.output_vectors
        assert np.allclose(expectation, model.output_vectors[w_out], atol=1e-12)
        gradient = -model.output_vectors[w_out] + expectation
        assert np.allclose(gradient, 0.0, atol=1e-12)


def cluster_corpus(n_sentences: int = 200, seed: int = 7):
    rng = np.random.default_rng(seed)
    words_a = [f"a{i}" for i in range(5)]
    words_b = [f"b{i}" for i in range(5)]
    texts = []
    for i in range(n_sentences):
        pool = words_a if i % 2 == 0 else words_b
        texts.append(" ".join(rng.permutation(pool).tolist()))
    vocab = make_vocab(*texts)
    return vocab, encode_corpus(vocab, *texts), words_a, words_b


def cluster_margin(table, vocab, words_a, words_b) -> float:
    def mean_cos(group1, group2, exclude_same):
        values = []
        for wi in group1:
            for wj in group2:
                if exclude_same and wi == wj:
                    continue
                vi = table.vectors[vocab.lookup(wi)]
                vj = table.vectors[vocab.lookup(wj)]
                values.append(vi @ vj / (np.linalg.norm(vi) * np.linalg.norm(vj)))
        return float(np.mean(values))

    within = (mean_cos(words_a, words_a, True) + mean_cos(words_b, words_b, True)) / 2
    cross = mean_cos(words_a, words_b, False)
    return within - cross


class TestTrain:
    def test_zero_epochs_is_initialization(self):
        vocab, records, _, _ = cluster_corpus(10)
        config = SgdConfig(dim=8, epochs=0, seed=5)
        model, losses = train(records, vocab, config)
        expected = initialize_model(len(vocab), 8, np.random.default_rng(5))
        assert np.array_equal(model.input_vectors, expected.input_vectors)
        assert np.array_equal(model.output_vectors, expected.output_vectors)
        assert losses == []

    def test_deterministic(self):
        vocab, records, _, _ = cluster_corpus(10)
        config = SgdConfig(dim=8, epochs=3, seed=5)
        m1, l1 = train(records, vocab, config)
        m2, l2 = train(records, vocab, config)
        assert np.array_equal(m1.input_vectors, m2.input_vectors)
        assert np.array_equal(m1.output_vectors, m2.output_vectors)
        assert l1 == l2

    def test_two_cluster_separation(self):
        vocab, records, words_a, words_b = cluster_corpus(100)
        config = SgdConfig(
            dim=16, learning_rate=0.05, epochs=30, k_negatives=5, window=4, seed=11
        )
        model, _ = train(records, vocab, config)
        margin = cluster_margin(model.embedding_table(), vocab, words_a, words_b)
        assert margin >= 0.3

    def test_loss_non_increasing_early(self):
        vocab, records, _, _ = cluster_corpus(200)
        config = SgdConfig(
            dim=16, learning_rate=0.05, epochs=10, k_negatives=5, window=4, seed=1
        )
        _, losses = train(records, vocab, config)
        increases = [
            (losses[i + 1] - losses[i]) / losses[i]
            for i in range(len(losses) - 1)
            if losses[i + 1] > losses[i]
        ]
        assert len(increases) <= 1
        assert all(inc < 0.01 for inc in increases)

    def test_divergence_names_epoch(self):
        vocab, records, _, _ = cluster_corpus(10)
        config = SgdConfig(dim=8, learning_rate=1e12, linear_decay=False, epochs=5, seed=0)
        with np.errstate(over="ignore"), pytest.raises(NumericalError, match="epoch"):
            train(records, vocab, config)

    def test_final_embedding_is_average(self):
        vocab, records, _, _ = cluster_corpus(6)
        model, _ = train(records, vocab, SgdConfig(dim=4, epochs=1, seed=2))
        table = model.embedding_table()
        assert np.allclose(
            table.vectors, (model.input_vectors + model.output_vectors) / 2
        )

    def test_progress_callback(self):
        vocab, records, _, _ = cluster_corpus(6)
        seen = []
        train(
            records, vocab, SgdConfig(dim=4, epochs=3, seed=2),
            progress=lambda e, loss: seen.append((e, loss)),
        )
        assert [e for e, _ in seen] == [0, 1, 2]
