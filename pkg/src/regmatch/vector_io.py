"""Vector file formats shared by the embedding backends and the CLI.

Word and sentence vectors use the word2vec text convention: a header line
``count dim`` followed by one ``label v1 v2 ... vd`` line per vector, values
printed with 6 significant digits.  Sentence vectors reuse the same format
with ``doc_id#seq`` labels.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


def save_vectors(path: str | Path, labels: Sequence[str], matrix: np.ndarray) -> None:
    """Write labeled vectors in word2vec text format.

    Labels must not contain whitespace (the format is space-delimited).
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != len(labels):
        raise ValueError("matrix must be 2-D with one row per label")
    for label in labels:
        if any(ch.isspace() for ch in label):
            raise ValueError(f"label {label!r} contains whitespace")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{matrix.shape[0]} {matrix.shape[1]}\n")
        for label, row in zip(labels, matrix):
            values = " ".join(f"{v:.6g}" for v in row)
            fh.write(f"{label} {values}\n")


def load_vectors(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Read a word2vec text file back into (labels, float64 matrix)."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ValueError(f"{path}: malformed header")
        count, dim = int(header[0]), int(header[1])
        labels: list[str] = []
        rows = np.empty((count, dim), dtype=np.float64)
        for i in range(count):
            parts = fh.readline().split()
            if len(parts) != dim + 1:
                raise ValueError(f"{path}: malformed vector line {i + 2}")
            labels.append(parts[0])
            rows[i] = [float(v) for v in parts[1:]]
    return labels, rows


def sentence_label(doc_id: str, seq: int) -> str:
    return f"{doc_id}#{seq}"


def parse_sentence_label(label: str) -> tuple[str, int]:
    doc_id, _, seq = label.rpartition("#")
    if not doc_id:
        raise ValueError(f"not a sentence label: {label!r}")
    return doc_id, int(seq)


def save_sentence_vectors(
    path: str | Path, keys: Sequence[tuple[str, int]], matrix: np.ndarray
) -> None:
    save_vectors(path, [sentence_label(d, s) for d, s in keys], matrix)


def load_sentence_vectors(path: str | Path) -> tuple[list[tuple[str, int]], np.ndarray]:
    labels, matrix = load_vectors(path)
    return [parse_sentence_label(label) for label in labels], matrix


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> None:
    """One sorted-key JSON object per line; deterministic byte output."""
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows
