"""Corpus ingestion: cleaning, sentence splitting, tokenization, vocabulary.

Raw rule/policy documents come in as pre-extracted text.  The pipeline here
is deterministic end to end: clean the text, split it into bounded-length
sentences, tokenize into lowercase word tokens, and build a frequency
vocabulary with reserved ``<unk>``/``<mask>`` ids.  Whole-word masking for
masked-language-model training also lives here because it only needs the
vocabulary and a seed.
"""

from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyCorpusError

# Reserved vocabulary slots.  Surface forms contain '<'/'>' which the
# tokenizer strips, so they can never collide with a real corpus token.
UNK_ID = 0
MASK_ID = 1
UNK_TOKEN = "<unk>"
MASK_TOKEN = "<mask>"

# Characters removed by default: brackets and hashtags.  Control characters
# are always removed regardless of this set.
DEFAULT_STRIP_CHARS = "()[]{}<>#"

_TOKEN_RE = re.compile(r"[a-z0-9]+")
_WS_RE = re.compile(r"\s+")
_TERMINATORS = ".!?"


class DocKind(str, Enum):
    RULE = "rule"
    POLICY = "policy"


@dataclass(frozen=True)
class Document:
    """One raw input document (a rule or a policy)."""

    doc_id: str
    kind: DocKind
    raw_text: str


@dataclass(frozen=True)
class SentenceRecord:
    """A cleaned, bounded-length piece of a document.

    ``tokens`` holds vocabulary ids and is empty until the record passes
    through :func:`encode_sentences` (the vocabulary does not exist yet at
    split time).
    """

    doc_id: str
    seq: int
    text: str
    tokens: tuple[int, ...] = ()

    @property
    def key(self) -> tuple[str, int]:
        return (self.doc_id, self.seq)


class HardCutWarning(UserWarning):
    """A single unbroken token exceeded max_len and was cut mid-token."""


def clean_text(raw: str, strip_chars: str = DEFAULT_STRIP_CHARS) -> str:
    """Remove noise characters and collapse whitespace.

    Idempotent: applying it twice gives the same result.  Control characters
    are always dropped; ``strip_chars`` configures the additional set.

    Args:
        raw: Input text, possibly empty.
        strip_chars: Characters to delete (default brackets and hashtags).

    Returns:
        Cleaned text with single spaces and no leading/trailing whitespace.
    """
    drop = set(strip_chars)
    kept = []
    for ch in raw:
        if ch in drop:
            continue
        if ch.isspace():
            kept.append(" ")
        elif ord(ch) < 32 or ch == "\x7f":
            continue
        else:
            kept.append(ch)
    return _WS_RE.sub(" ", "".join(kept)).strip()


def split_sentences(doc: Document, max_len: int = 200) -> list[SentenceRecord]:
    """Split a cleaned document into pieces of at most ``max_len`` characters.

    Greedy left-to-right: whenever the remaining text exceeds ``max_len``,
    cut after the last sentence terminator (``. ! ?``) inside the window,
    falling back to the last whitespace, and finally to a hard cut at
    ``max_len`` (which emits a :class:`HardCutWarning`).  Boundary whitespace
    between pieces is dropped; all other characters are preserved.

    Args:
        doc: Document whose ``raw_text`` is already cleaned.
        max_len: Maximum piece length in characters.

    Returns:
        Sentence records in document order, ``seq`` counting from 0.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    text = doc.raw_text
    records: list[SentenceRecord] = []
    pos = 0
    seq = 0
    n = len(text)
    while pos < n:
        remaining = n - pos
        if remaining <= max_len:
            piece = text[pos:].strip()
            pos = n
        else:
            window = text[pos : pos + max_len]
            cut = _find_cut(window)
            if cut is None:
                warnings.warn(
                    f"hard cut inside unbroken token in document {doc.doc_id!r}",
                    HardCutWarning,
                )
                cut = max_len
            piece = window[:cut].strip()
            pos += cut
            while pos < n and text[pos].isspace():
                pos += 1
        if piece:
            records.append(SentenceRecord(doc.doc_id, seq, piece))
            seq += 1
    return records


def _find_cut(window: str) -> int | None:
    """Best cut index within a window: after the last terminator, else at the
    last whitespace, else None."""
    best_term = max(window.rfind(t) for t in _TERMINATORS)
    if best_term >= 0:
        return best_term + 1
    for i in range(len(window) - 1, 0, -1):
        if window[i].isspace():
            return i
    return None


def tokenize(text: str) -> list[str]:
    """Lowercase word tokenizer: maximal runs of ``[a-z0-9]``.

    Punctuation and symbols act as delimiters, so ``"FCA-approved"`` yields
    ``["fca", "approved"]``.
    """
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Vocabulary:
    """Token to id bijection with exact corpus frequencies.

    Ids are dense in ``[0, size)``.  Ids 0 and 1 are reserved for ``<unk>``
    and ``<mask>``.  Frequencies of all ids sum to ``total_tokens``; tokens
    below the build threshold have their occurrences counted under
    ``<unk>``.
    """

    token_to_id: dict[str, int]
    id_to_token: list[str]
    frequencies: np.ndarray  # int64, indexed by id
    total_tokens: int = field(init=False)

    def __post_init__(self):
        self.frequencies = np.asarray(self.frequencies, dtype=np.int64)
        self.total_tokens = int(self.frequencies.sum())

    def __len__(self) -> int:
        return len(self.id_to_token)

    def lookup(self, surface: str) -> int:
        """Id of a surface form; unknown tokens map to the ``<unk>`` id."""
        return self.token_to_id.get(surface, UNK_ID)

    def surface(self, token_id: int) -> str:
        return self.id_to_token[token_id]

    def frequency(self, token_id: int) -> int:
        return int(self.frequencies[token_id])

    def encode(self, tokens: Iterable[str]) -> tuple[int, ...]:
        return tuple(self.token_to_id.get(t, UNK_ID) for t in tokens)

    def save(self, path: str | Path) -> None:
        """Write one ``surface<TAB>frequency`` line per token in id order."""
        with open(path, "w", encoding="utf-8") as fh:
            for token_id, surface in enumerate(self.id_to_token):
                fh.write(f"{surface}\t{int(self.frequencies[token_id])}\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        id_to_token: list[str] = []
        freqs: list[int] = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                surface, freq = line.split("\t")
                id_to_token.append(surface)
                freqs.append(int(freq))
        token_to_id = {t: i for i, t in enumerate(id_to_token)}
        return cls(token_to_id, id_to_token, np.asarray(freqs, dtype=np.int64))


def build_vocabulary(
    sentences: Sequence[SentenceRecord], min_count: int = 1
) -> Vocabulary:
    """Count tokens over the corpus and assign dense ids.

    Tokens occurring at least ``min_count`` times get an id; rarer tokens
    fold into ``<unk>``.  Ids after the reserved pair are ordered by
    descending frequency, ties broken alphabetically.  ``min_count`` values
    below 1 behave as 1.

    Raises:
        EmptyCorpusError: No tokens in the whole corpus.
    """
    min_count = max(min_count, 1)
    counts: dict[str, int] = {}
    for record in sentences:
        for token in tokenize(record.text):
            counts[token] = counts.get(token, 0) + 1
    if not counts:
        raise EmptyCorpusError("empty corpus")

    kept = sorted(
        (t for t, c in counts.items() if c >= min_count),
        key=lambda t: (-counts[t], t),
    )
    id_to_token = [UNK_TOKEN, MASK_TOKEN] + kept
    token_to_id = {t: i for i, t in enumerate(id_to_token)}
    unk_total = sum(c for t, c in counts.items() if c < min_count)
    freqs = [unk_total, 0] + [counts[t] for t in kept]
    return Vocabulary(token_to_id, id_to_token, np.asarray(freqs, dtype=np.int64))


def encode_sentences(
    sentences: Sequence[SentenceRecord], vocab: Vocabulary
) -> list[SentenceRecord]:
    """Attach vocabulary ids to sentence records.

    Records whose text yields no tokens at all are dropped (they carry no
    signal for any downstream embedding).
    """
    encoded = []
    for record in sentences:
        ids = vocab.encode(tokenize(record.text))
        if ids:
            encoded.append(replace(record, tokens=ids))
    return encoded


@dataclass(frozen=True)
class MaskedBatch:
    """A sentence with a deterministic subset of positions masked out."""

    original: tuple[int, ...]
    masked: tuple[int, ...]
    positions: tuple[int, ...]
    seed: int


def mask_tokens(
    tokens: Sequence[int], mask_fraction: float = 0.15, seed: int = 0
) -> MaskedBatch:
    """Mask ``round(mask_fraction * len(tokens))`` positions (at least one).

    With the word-level tokenizer every position is a whole word, so
    whole-word masking selects single positions.  Deterministic for a fixed
    seed.

    Args:
        tokens: Token ids of one sentence (non-empty).
        mask_fraction: Fraction of positions to mask, in (0, 1).
        seed: RNG seed recorded in the output batch.
    """
    if not 0 < mask_fraction < 1:
        raise ValueError("mask_fraction must be in (0, 1)")
    if len(tokens) == 0:
        raise ValueError("cannot mask an empty sentence")
    n_mask = max(1, round(mask_fraction * len(tokens)))
    rng = np.random.default_rng(seed)
    positions = tuple(sorted(rng.choice(len(tokens), size=n_mask, replace=False).tolist()))
    masked = list(tokens)
    for p in positions:
        masked[p] = MASK_ID
    return MaskedBatch(tuple(tokens), tuple(masked), positions, seed)


# ---------------------------------------------------------------------------
# File formats: documents and sentences as JSON-lines.
# ---------------------------------------------------------------------------

def read_documents(path: str | Path) -> list[Document]:
    """Read one JSON object per line: {"doc_id", "kind", "text"}."""
    docs = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            try:
                docs.append(
                    Document(str(obj["doc_id"]), DocKind(obj["kind"]), str(obj["text"]))
                )
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}: bad document on line {line_no}: {exc}") from exc
    return docs


def write_sentences(path: str | Path, sentences: Iterable[SentenceRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in sentences:
            fh.write(
                json.dumps(
                    {"doc_id": record.doc_id, "seq": record.seq, "text": record.text},
                    sort_keys=True,
                )
                + "\n"
            )


def read_sentences(path: str | Path) -> list[SentenceRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            records.append(SentenceRecord(obj["doc_id"], int(obj["seq"]), obj["text"]))
    return records
