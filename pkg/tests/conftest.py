"""Shared fixtures and oracles for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from regmatch import corpus
from regmatch.attention import EncoderParams


def make_vocab(*sentences: str, min_count: int = 1) -> corpus.Vocabulary:
    records = [corpus.SentenceRecord("doc", i, s) for i, s in enumerate(sentences)]
    return corpus.build_vocabulary(records, min_count)


def encode_corpus(vocab: corpus.Vocabulary, *sentences: str) -> list[corpus.SentenceRecord]:
    records = [corpus.SentenceRecord("doc", i, s) for i, s in enumerate(sentences)]
    return corpus.encode_sentences(records, vocab)


def params_equal(a: EncoderParams, b: EncoderParams) -> bool:
    return all(
        np.array_equal(getattr(a, name), getattr(b, name))
        for name in EncoderParams.TENSOR_FIELDS
    )


def check_gradients(
    loss_fn,
    params: EncoderParams,
    grads,
    eps: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-7,
    coords_per_tensor: int | None = None,
    rng: np.random.Generator | None = None,
) -> None:
    """Compare analytic gradients against central finite differences.

    Mutates params entries in place (restoring them), so ``loss_fn`` must
    recompute the forward pass from ``params``.  With ``coords_per_tensor``
    set, only a random subset of coordinates per tensor is checked.
    """
    for name in EncoderParams.TENSOR_FIELDS:
        tensor = getattr(params, name)
        grad = getattr(grads, name)
        flat = tensor.reshape(-1)
        grad_flat = grad.reshape(-1)
        if coords_per_tensor is not None and flat.size > coords_per_tensor:
            assert rng is not None
            indices = rng.choice(flat.size, size=coords_per_tensor, replace=False)
        else:
            indices = range(flat.size)
        for i in indices:
            original = flat[i]
            flat[i] = original + eps
            up = loss_fn(params)
            flat[i] = original - eps
            down = loss_fn(params)
            flat[i] = original
            fd = (up - down) / (2 * eps)
            analytic = grad_flat[i]
            tol = atol + rtol * max(abs(analytic), abs(fd))
            assert abs(analytic - fd) <= tol, (
                f"{name}[{i}]: analytic={analytic:.8e} fd={fd:.8e}"
            )


@pytest.fixture
def rng():
    return np.random.default_rng(42)
