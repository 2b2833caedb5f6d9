"""Vocabularies, documents as discrete measures, and labeled corpora.

A document is a sparse normalized bag-of-words: positive masses on a subset
of vocabulary positions, summing to one within ``SIMPLEX_ATOL``. All types
are immutable after construction and safe to share across threads.
Validation is report-based (`validate_corpus`), so intentionally broken
instances can be constructed and diagnosed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyDocument, UnknownToken

SIMPLEX_ATOL = 1e-9


@dataclass(frozen=True)
class Vocabulary:
    """Ordered list of unique token strings; position i is leaf node i."""

    words: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        words = tuple(self.words)
        if len(words) == 0:
            raise ValueError("vocabulary must contain at least one word")
        index = {w: i for i, w in enumerate(words)}
        if len(index) != len(words):
            raise ValueError("vocabulary words must be unique")
        object.__setattr__(self, "words", words)
        object.__setattr__(self, "index", index)

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word) -> bool:
        return word in self.index

    def sha256(self) -> str:
        """Hash of the word order; identifies the leaf layout trees were built for."""
        h = hashlib.sha256()
        for w in self.words:
            h.update(w.encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()


@dataclass(frozen=True)
class Document:
    """Sparse bag-of-words over a vocabulary of size ``n_leaf``.

    ``positions`` and ``masses`` are parallel arrays sorted by position;
    masses of a valid document are positive and sum to one.
    """

    n_leaf: int
    positions: np.ndarray
    masses: np.ndarray
    label: int | None = None

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=np.int64).reshape(-1)
        masses = np.asarray(self.masses, dtype=np.float64).reshape(-1)
        if positions.shape != masses.shape:
            raise ValueError("positions and masses must have equal length")
        order = np.argsort(positions, kind="stable")
        positions = positions[order].copy()
        masses = masses[order].copy()
        positions.setflags(write=False)
        masses.setflags(write=False)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "masses", masses)

    def dense(self) -> np.ndarray:
        out = np.zeros(self.n_leaf)
        out[self.positions] = self.masses
        return out

    def mass_sum(self) -> float:
        return float(np.sum(self.masses))


@dataclass(frozen=True)
class Split:
    """Disjoint train/valid/test document index sets; may cover a subset."""

    train: tuple[int, ...] = ()
    valid: tuple[int, ...] = ()
    test: tuple[int, ...] = ()


@dataclass(frozen=True)
class LabeledCorpus:
    vocabulary: Vocabulary
    documents: tuple[Document, ...]
    split: Split = Split()


def normalize_counts(counts, vocab: Vocabulary, label=None,
                     on_unknown: str = "drop") -> Document:
    """Turn a token->count map into a normalized Document.

    Unknown tokens are dropped by default; pass ``on_unknown="error"`` to
    raise `UnknownToken` instead. Counts already summing to one (within
    the simplex tolerance) are kept verbatim so save/load round-trips are
    bitwise exact.
    """
    if on_unknown not in ("drop", "error"):
        raise ValueError(f"on_unknown must be 'drop' or 'error', got {on_unknown!r}")
    pos_mass: dict[int, float] = {}
    for token, count in counts.items():
        if token not in vocab:
            if on_unknown == "error":
                raise UnknownToken(f"token {token!r} not in vocabulary")
            continue
        c = float(count)
        if c < 0:
            raise ValueError(f"negative count for token {token!r}")
        if c == 0.0:
            continue
        p = vocab.index[token]
        pos_mass[p] = pos_mass.get(p, 0.0) + c
    if not pos_mass:
        raise EmptyDocument("no positive in-vocabulary counts")
    positions = np.array(sorted(pos_mass), dtype=np.int64)
    raw = np.array([pos_mass[p] for p in positions])
    total = raw.sum()
    masses = raw if abs(total - 1.0) <= SIMPLEX_ATOL else raw / total
    return Document(len(vocab), positions, masses, label)


def scale_measure(doc: Document, factor: float) -> np.ndarray:
    """Dense vector of ``factor`` times the document masses, no renormalization."""
    if factor <= 0:
        raise ValueError("factor must be positive")
    out = np.zeros(doc.n_leaf)
    out[doc.positions] = doc.masses * factor
    return out


def validate_corpus(corpus: LabeledCorpus) -> list[str]:
    """Report every violated document or corpus invariant; empty iff valid."""
    problems = []
    n_leaf = len(corpus.vocabulary)
    for i, doc in enumerate(corpus.documents):
        if doc.n_leaf != n_leaf:
            problems.append(
                f"document {i}: declares {doc.n_leaf} leaves, vocabulary has {n_leaf}")
        if doc.positions.size:
            if doc.positions[0] < 0 or doc.positions[-1] >= n_leaf:
                problems.append(f"document {i}: positions outside [0, {n_leaf})")
            if np.any(np.diff(doc.positions) == 0):
                problems.append(f"document {i}: duplicate positions")
        if np.any(doc.masses <= 0):
            problems.append(f"document {i}: non-positive masses")
        total = doc.mass_sum()
        if abs(total - 1.0) > SIMPLEX_ATOL:
            problems.append(
                f"document {i}: masses sum to {total!r}, expected 1 within {SIMPLEX_ATOL}")
    n_docs = len(corpus.documents)
    index_sets = {}
    for name in ("train", "valid", "test"):
        idx = getattr(corpus.split, name)
        bad = [j for j in idx if j < 0 or j >= n_docs]
        if bad:
            problems.append(f"{name} split: indices out of range: {bad}")
        if len(set(idx)) != len(idx):
            problems.append(f"{name} split: repeated indices")
        index_sets[name] = set(idx)
    for a, b in (("train", "valid"), ("train", "test"), ("valid", "test")):
        overlap = sorted(index_sets[a] & index_sets[b])
        if overlap:
            problems.append(f"splits {a}/{b} overlap at indices {overlap}")
    return problems
