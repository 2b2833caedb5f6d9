"""Corpus, split, and embedding file IO plus the synthetic dataset generator.

Corpus files are newline-delimited JSON records
``{"label": <int>, "tokens": {"<word>": <count>, ...}}``; the vocabulary
is the sorted union of tokens. Split files hold three whitespace-separated
index lists under ``train:`` / ``valid:`` / ``test:`` headers. Embedding
files are word-per-line text with an optional ``<count> <dim>`` header.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import EmptyCorpus, MissingWord, ParseError
from .measures import Document, LabeledCorpus, Split, Vocabulary, normalize_counts

# The ten-instrument toy vocabulary, in canonical sorted order.
INSTRUMENT_WORDS = (
    "cello", "clarinet", "contrabass", "flute", "harpsichord",
    "piano", "trombone", "trumpet", "viola", "violin",
)
MARKER_WORDS = ("piano", "violin")  # class 0 / class 1


@dataclass(frozen=True)
class EmbeddingTable:
    """One embedding vector per vocabulary word, in vocabulary order."""

    vocabulary: Vocabulary
    vectors: np.ndarray

    def __post_init__(self):
        vecs = np.asarray(self.vectors, dtype=np.float64)
        if vecs.ndim != 2 or vecs.shape[0] != len(self.vocabulary):
            raise ValueError("need one vector per vocabulary word")
        vecs = vecs.copy()
        vecs.setflags(write=False)
        object.__setattr__(self, "vectors", vecs)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def _parse_record(obj, line_no: int):
    if not isinstance(obj, dict):
        raise ParseError("record is not an object", line=line_no)
    label = obj.get("label")
    tokens = obj.get("tokens")
    if not isinstance(label, int) or isinstance(label, bool):
        raise ParseError("missing or non-integer 'label'", line=line_no)
    if not isinstance(tokens, dict) or not tokens:
        raise ParseError("missing or empty 'tokens' map", line=line_no)
    for word, count in tokens.items():
        if not isinstance(word, str):
            raise ParseError(f"token key {word!r} is not a string", line=line_no)
        if not isinstance(count, (int, float)) or isinstance(count, bool):
            raise ParseError(f"count for {word!r} is not a number", line=line_no)
        if count < 0:
            raise ParseError(f"negative count for {word!r}", line=line_no)
    if not any(c > 0 for c in tokens.values()):
        raise ParseError("document has no positive counts", line=line_no)
    return label, tokens


def load_corpus(path, format: str = "jsonl", splits_path=None) -> LabeledCorpus:
    """Load a corpus file; vocabulary is the sorted union of its tokens."""
    if format != "jsonl":
        raise ValueError(f"unknown corpus format {format!r}")
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(str(exc), line=line_no) from None
            records.append(_parse_record(obj, line_no))
    if not records:
        raise EmptyCorpus(f"no records in {path}")
    words = sorted({w for _, tokens in records for w, c in tokens.items() if c > 0})
    vocab = Vocabulary(tuple(words))
    docs = tuple(normalize_counts(tokens, vocab, label=label)
                 for label, tokens in records)
    split = load_splits(splits_path) if splits_path else Split()
    return LabeledCorpus(vocab, docs, split)


def save_corpus(corpus: LabeledCorpus, path) -> None:
    """Write a corpus as JSON lines; masses round-trip bitwise."""
    words = corpus.vocabulary.words
    with open(path, "w", encoding="utf-8") as fh:
        for doc in corpus.documents:
            tokens = {words[p]: m for p, m in zip(doc.positions.tolist(),
                                                  doc.masses.tolist())}
            fh.write(json.dumps({"label": doc.label, "tokens": tokens}))
            fh.write("\n")


def load_splits(path) -> Split:
    """Parse a split file into train/valid/test index tuples."""
    headers = {"train:": "train", "valid:": "valid", "test:": "test"}
    lists: dict[str, list[int]] = {"train": [], "valid": [], "test": []}
    current = None
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            for token in line.split():
                if token in headers:
                    current = headers[token]
                    continue
                if current is None:
                    raise ParseError(f"index {token!r} before any header",
                                     line=line_no)
                try:
                    lists[current].append(int(token))
                except ValueError:
                    raise ParseError(f"not an index: {token!r}",
                                     line=line_no) from None
    return Split(tuple(lists["train"]), tuple(lists["valid"]), tuple(lists["test"]))


def save_splits(split: Split, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for name in ("train", "valid", "test"):
            fh.write(f"{name}:\n")
            idx = getattr(split, name)
            if idx:
                fh.write(" ".join(str(i) for i in idx))
                fh.write("\n")


def load_embeddings(path, vocab: Vocabulary, missing: str = "error",
                    seed: int = 0) -> EmbeddingTable:
    """Load textual word embeddings aligned to the vocabulary order.

    ``missing="random"`` fills absent words with seeded standard-normal
    vectors instead of raising `MissingWord`.
    """
    if missing not in ("error", "random"):
        raise ValueError(f"missing policy must be 'error' or 'random', got {missing!r}")
    vectors: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if line_no == 1 and len(parts) == 2:
                try:
                    int(parts[0]), int(parts[1])
                    continue  # header line
                except ValueError:
                    pass
            word, values = parts[0], parts[1:]
            if not values:
                raise ParseError(f"no values for word {word!r}", line=line_no)
            if dim is None:
                dim = len(values)
            elif len(values) != dim:
                raise ParseError(
                    f"expected {dim} values, found {len(values)}", line=line_no)
            try:
                vec = np.array([float(v) for v in values])
            except ValueError:
                raise ParseError(f"non-numeric value for {word!r}",
                                 line=line_no) from None
            if word in vocab and word not in vectors:
                vectors[word] = vec
    if dim is None:
        raise ParseError(f"no embedding lines in {path}")
    absent = [w for w in vocab.words if w not in vectors]
    if absent:
        if missing == "error":
            raise MissingWord(f"words without embeddings: {absent[:10]}")
        rng = np.random.default_rng(seed)
        for w in absent:
            vectors[w] = rng.standard_normal(dim)
    return EmbeddingTable(vocab, np.stack([vectors[w] for w in vocab.words]))


def synthetic_instruments(n_train: int, n_test: int, seed: int) -> LabeledCorpus:
    """Two-class toy corpus over the ten instrument words.

    Every document contains exactly one marker word (piano -> class 0,
    violin -> class 1, chosen uniformly) and each of the other eight words
    independently with probability 1/2, all with count one.
    """
    if n_train <= 0 or n_test <= 0:
        raise ValueError("n_train and n_test must be positive")
    vocab = Vocabulary(INSTRUMENT_WORDS)
    others = [w for w in INSTRUMENT_WORDS if w not in MARKER_WORDS]
    rng = np.random.default_rng(seed)
    docs = []
    for _ in range(n_train + n_test):
        cls = int(rng.integers(0, 2))
        counts = {MARKER_WORDS[cls]: 1}
        for w in others:
            if rng.random() < 0.5:
                counts[w] = 1
        docs.append(normalize_counts(counts, vocab, label=cls))
    split = Split(train=tuple(range(n_train)),
                  test=tuple(range(n_train, n_train + n_test)))
    return LabeledCorpus(vocab, tuple(docs), split)
