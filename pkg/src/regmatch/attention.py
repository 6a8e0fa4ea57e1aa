"""Miniature transformer encoder: one multi-head attention layer.

Forward path: token + positional embeddings -> per-head scaled-dot attention
-> concatenate heads -> output projection -> mean pooling -> L2-normalized
sentence vector.  A vocabulary projection rides along for masked-token
prediction.  The backward pass is written out by hand (vector-Jacobian
products through every stage) so the adaptation training loops can run on
plain SGD and be finite-difference checked.

All math is float64; checkpoints store float32.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import NumericalError


@dataclass(frozen=True)
class AttentionConfig:
    """Encoder shape: embedding width d_e split across h heads of width d_w."""

    d_e: int = 64
    h: int = 4
    L_max: int = 64

    def __post_init__(self):
        if self.d_e % self.h != 0:
            raise ValueError(f"head count {self.h} must divide d_e={self.d_e}")
        if self.L_max < 1:
            raise ValueError("L_max must be >= 1")

    @property
    def d_w(self) -> int:
        return self.d_e // self.h


@dataclass
class EncoderParams:
    """All trainable tensors of the encoder.

    Shapes: token_emb (V, d_e), pos_emb (L_max, d_e), w_q/w_k/w_v
    (h, d_e, d_w), w_o (d_e, d_e), vocab_proj (d_e, V).
    """

    config: AttentionConfig
    token_emb: np.ndarray
    pos_emb: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    vocab_proj: np.ndarray

    TENSOR_FIELDS = ("token_emb", "pos_emb", "w_q", "w_k", "w_v", "w_o", "vocab_proj")

    @property
    def vocab_size(self) -> int:
        return self.token_emb.shape[0]

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            self.config, *(getattr(self, f).copy() for f in self.TENSOR_FIELDS)
        )

    def validate(self) -> None:
        cfg = self.config
        expected = {
            "token_emb": (self.vocab_size, cfg.d_e),
            "pos_emb": (cfg.L_max, cfg.d_e),
            "w_q": (cfg.h, cfg.d_e, cfg.d_w),
            "w_k": (cfg.h, cfg.d_e, cfg.d_w),
            "w_v": (cfg.h, cfg.d_e, cfg.d_w),
            "w_o": (cfg.d_e, cfg.d_e),
            "vocab_proj": (cfg.d_e, self.vocab_size),
        }
        for name, shape in expected.items():
            tensor = getattr(self, name)
            if tensor.shape != shape:
                raise ValueError(f"{name} has shape {tensor.shape}, expected {shape}")
            if not np.all(np.isfinite(tensor)):
                raise NumericalError(f"{name} contains NaN or Inf")


def initialize_params(
    vocab_size: int, config: AttentionConfig, seed: int = 0
) -> EncoderParams:
    """Weights ~ Normal(0, 1/sqrt(d_e)); vocabulary projection starts at zero
    so an untrained masked-token head predicts the uniform distribution."""
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(config.d_e)

    def normal(*shape):
        return rng.normal(0.0, scale, size=shape)

    return EncoderParams(
        config=config,
        token_emb=normal(vocab_size, config.d_e),
        pos_emb=normal(config.L_max, config.d_e),
        w_q=normal(config.h, config.d_e, config.d_w),
        w_k=normal(config.h, config.d_e, config.d_w),
        w_v=normal(config.h, config.d_e, config.d_w),
        w_o=normal(config.d_e, config.d_e),
        vocab_proj=np.zeros((config.d_e, vocab_size)),
    )


@dataclass
class EncoderGradients:
    """Gradient tensors mirroring :class:`EncoderParams`."""

    token_emb: np.ndarray
    pos_emb: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    vocab_proj: np.ndarray

    @classmethod
    def zeros_like(cls, params: EncoderParams) -> "EncoderGradients":
        return cls(*(np.zeros_like(getattr(params, f)) for f in EncoderParams.TENSOR_FIELDS))

    def add_(self, other: "EncoderGradients") -> "EncoderGradients":
        for f in (fld.name for fld in fields(self)):
            getattr(self, f).__iadd__(getattr(other, f))
        return self

    def scale_(self, factor: float) -> "EncoderGradients":
        for f in (fld.name for fld in fields(self)):
            getattr(self, f).__imul__(factor)
        return self


def sgd_step(params: EncoderParams, grads: EncoderGradients, lr: float) -> None:
    """In-place plain-SGD update of every tensor."""
    for f in EncoderParams.TENSOR_FIELDS:
        getattr(params, f).__isub__(lr * getattr(grads, f))


@dataclass(frozen=True)
class SentenceVector:
    values: np.ndarray
    normalized: bool = True


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

def softmax_rows(scores: np.ndarray) -> np.ndarray:
    """Row softmax with max subtraction; safe at extreme magnitudes."""
    shifted = scores - scores.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def embed_tokens(params: EncoderParams, token_ids: Sequence[int]) -> np.ndarray:
    """X[i] = token embedding of id_i plus positional embedding of slot i."""
    length = len(token_ids)
    if length > params.config.L_max:
        raise ValueError(f"sequence length {length} exceeds L_max={params.config.L_max}")
    ids = np.asarray(token_ids, dtype=np.intp)
    return params.token_emb[ids] + params.pos_emb[:length]


def scaled_dot_attention(
    Q: np.ndarray, K: np.ndarray, V: np.ndarray, d_w: int | None = None
) -> np.ndarray:
    """softmax(Q K^T / sqrt(d_w)) V for one head."""
    if Q.shape != K.shape or Q.shape[0] != V.shape[0]:
        raise ValueError("Q, K, V have incompatible shapes")
    if d_w is None:
        d_w = Q.shape[1]
    weights = softmax_rows(Q @ K.T / np.sqrt(d_w))
    return weights @ V


@dataclass
class ForwardCache:
    """Recorded activations of one sentence forward pass."""

    token_ids: tuple[int, ...]
    X: np.ndarray        # (L, d_e)
    Q: np.ndarray        # (h, L, d_w)
    K: np.ndarray
    V: np.ndarray
    A: np.ndarray        # (h, L, L) attention weights
    O: np.ndarray        # (L, d_e) concatenated heads
    xtilde: np.ndarray   # (L, d_e)
    pooled: np.ndarray   # (d_e,)
    norm: float
    sentence: np.ndarray  # (d_e,) unit vector


def forward(params: EncoderParams, token_ids: Sequence[int]) -> ForwardCache:
    """Run the full encoder on one sentence and record every activation."""
    if len(token_ids) == 0:
        raise ValueError("cannot encode an empty token list")
    cfg = params.config
    X = embed_tokens(params, token_ids)
    Q = np.einsum("le,hew->hlw", X, params.w_q)
    K = np.einsum("le,hew->hlw", X, params.w_k)
    V = np.einsum("le,hew->hlw", X, params.w_v)
    A = softmax_rows(np.einsum("hlw,hmw->hlm", Q, K) / np.sqrt(cfg.d_w))
    heads = np.einsum("hlm,hmw->hlw", A, V)
    O = np.transpose(heads, (1, 0, 2)).reshape(len(token_ids), cfg.d_e)
    xtilde = O @ params.w_o
    pooled = xtilde.mean(axis=0)
    norm = float(np.linalg.norm(pooled))
    if norm == 0.0 or not np.isfinite(norm):
        raise NumericalError("pooled sentence vector has zero or non-finite norm")
    return ForwardCache(
        tuple(token_ids), X, Q, K, V, A, O, xtilde, pooled, norm, pooled / norm
    )


def multi_head_attention(params: EncoderParams, X: np.ndarray) -> np.ndarray:
    """Contextualize an (L, d_e) matrix: per-head attention, concat, project."""
    cfg = params.config
    if X.ndim != 2 or X.shape[1] != cfg.d_e:
        raise ValueError(f"X must be (L, {cfg.d_e}), got {X.shape}")
    Q = np.einsum("le,hew->hlw", X, params.w_q)
    K = np.einsum("le,hew->hlw", X, params.w_k)
    V = np.einsum("le,hew->hlw", X, params.w_v)
    A = softmax_rows(np.einsum("hlw,hmw->hlm", Q, K) / np.sqrt(cfg.d_w))
    heads = np.einsum("hlm,hmw->hlw", A, V)
    O = np.transpose(heads, (1, 0, 2)).reshape(X.shape[0], cfg.d_e)
    return O @ params.w_o


def encode_sentence(
    params: EncoderParams, token_ids: Sequence[int], pool: str = "mean"
) -> SentenceVector:
    """Sentence embedding: mean over contextual rows, L2-normalized."""
    if pool != "mean":
        raise ValueError(f"unsupported pooling: {pool!r}")
    return SentenceVector(forward(params, token_ids).sentence)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def backward(
    params: EncoderParams,
    cache: ForwardCache | None,
    d_sentence: np.ndarray | None = None,
    d_xtilde: np.ndarray | None = None,
) -> EncoderGradients:
    """Backpropagate through the recorded forward pass.

    Exactly one upstream gradient must be supplied: ``d_sentence`` (w.r.t.
    the normalized sentence vector) or ``d_xtilde`` (w.r.t. the contextual
    token matrix, used by the masked-token loss).  ``vocab_proj`` receives a
    zero gradient here; the masked-token head owns it.

    Raises:
        ValueError: No recorded forward pass, or not exactly one upstream.
    """
    if cache is None:
        raise ValueError("backward called without a recorded forward pass")
    if (d_sentence is None) == (d_xtilde is None):
        raise ValueError("supply exactly one of d_sentence / d_xtilde")

    cfg = params.config
    L = len(cache.token_ids)
    grads = EncoderGradients.zeros_like(params)

    if d_sentence is not None:
        # u = pooled / norm; d_pooled = (I - u u^T) d_u / norm
        u = cache.sentence
        d_pooled = (d_sentence - (d_sentence @ u) * u) / cache.norm
        d_xtilde = np.broadcast_to(d_pooled / L, (L, cfg.d_e)).copy()

    grads.w_o[:] = cache.O.T @ d_xtilde
    dO = d_xtilde @ params.w_o.T
    # split rows back into per-head blocks: O was heads transposed+reshaped
    dHeads = dO.reshape(L, cfg.h, cfg.d_w).transpose(1, 0, 2)

    dA = np.einsum("hlw,hmw->hlm", dHeads, cache.V)
    dV = np.einsum("hml,hmw->hlw", cache.A, dHeads)
    # softmax rows: dS = A * (dA - sum(dA * A, axis=-1))
    dS = cache.A * (dA - (dA * cache.A).sum(axis=-1, keepdims=True))
    dS /= np.sqrt(cfg.d_w)
    dQ = np.einsum("hlm,hmw->hlw", dS, cache.K)
    dK = np.einsum("hml,hmw->hlw", dS, cache.Q)

    grads.w_q[:] = np.einsum("le,hlw->hew", cache.X, dQ)
    grads.w_k[:] = np.einsum("le,hlw->hew", cache.X, dK)
    grads.w_v[:] = np.einsum("le,hlw->hew", cache.X, dV)

    dX = (
        np.einsum("hlw,hew->le", dQ, params.w_q)
        + np.einsum("hlw,hew->le", dK, params.w_k)
        + np.einsum("hlw,hew->le", dV, params.w_v)
    )
    ids = np.asarray(cache.token_ids, dtype=np.intp)
    np.add.at(grads.token_emb, ids, dX)
    grads.pos_emb[:L] += dX
    return grads


# ---------------------------------------------------------------------------
# Checkpoint format: one JSON header line, then little-endian float32 payload.
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, params: EncoderParams) -> None:
    params.validate()
    sections = {}
    offset = 0
    payload = bytearray()
    for name in EncoderParams.TENSOR_FIELDS:
        tensor = np.ascontiguousarray(getattr(params, name), dtype="<f4")
        sections[name] = {"offset": offset, "shape": list(tensor.shape)}
        raw = tensor.tobytes()
        payload.extend(raw)
        offset += len(raw)
    header = {
        "d_e": params.config.d_e,
        "h": params.config.h,
        "L_max": params.config.L_max,
        "vocab_size": params.vocab_size,
        "sections": sections,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(bytes(payload))


def load_checkpoint(path: str | Path) -> EncoderParams:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()
    config = AttentionConfig(d_e=header["d_e"], h=header["h"], L_max=header["L_max"])
    tensors = {}
    for name in EncoderParams.TENSOR_FIELDS:
        section = header["sections"][name]
        shape = tuple(section["shape"])
        count = int(np.prod(shape))
        start = section["offset"]
        flat = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        tensors[name] = flat.reshape(shape).astype(np.float64)
    params = EncoderParams(config=config, **tensors)
    params.validate()
    return params
