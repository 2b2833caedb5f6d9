"""kNN classification, error reporting, and batch timing harness."""

from __future__ import annotations

import hashlib
import json
import time
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptySplit
from .measures import Document, LabeledCorpus
from .tree import TreeAdjacency, batch_distances

DEFAULT_K_GRID = (1, 3, 5, 7, 9, 11, 13, 15, 17, 19)


def config_hash(config: dict) -> str:
    """Short stable hash of a resolved configuration dict."""
    blob = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


class DistanceProvider:
    """Batchable document distances behind one interface."""

    provider_id = "abstract"

    def distances(self, query: Document, refs) -> np.ndarray:
        raise NotImplementedError

    def distance(self, a: Document, b: Document) -> float:
        return float(self.distances(a, [b])[0])


class HardTreeProvider(DistanceProvider):
    """Exact tree-Wasserstein over a hard tree (learned or built)."""

    def __init__(self, tree: TreeAdjacency, provider_id: str = "tree"):
        self.tree = tree
        self.provider_id = provider_id

    def distances(self, query, refs):
        return batch_distances(self.tree, query, refs)


class SoftTreeProvider(DistanceProvider):
    """Soft tree-Wasserstein of an un-hardened model."""

    provider_id = "stw-soft"

    def __init__(self, model):
        self.model = model

    def distances(self, query, refs):
        from .stw_train import soft_tree_wasserstein
        return np.array([soft_tree_wasserstein(self.model, query, r) for r in refs])


class TSWProvider(DistanceProvider):
    """Average tree-Wasserstein over a sampled tree set."""

    provider_id = "tsw"

    def __init__(self, tree_set):
        self.tree_set = tree_set

    def distances(self, query, refs):
        refs = list(refs)
        if not refs:
            return np.zeros(0)
        rows = np.stack([batch_distances(t, query, refs)
                         for t in self.tree_set.trees])
        return rows.mean(axis=0)


class FlowtreeProvider(DistanceProvider):
    provider_id = "flowtree"

    def __init__(self, cloud, qtree):
        self.cloud = cloud
        self.qtree = qtree

    def distances(self, query, refs):
        from .baselines import flowtree_distance
        return np.array([flowtree_distance(self.cloud, self.qtree, query, r)
                         for r in refs])


class OracleProvider(DistanceProvider):
    """Exact optimal transport under a word-pair ground cost (desk scale)."""

    provider_id = "oracle"

    def __init__(self, cost_matrix: np.ndarray):
        self.cost_matrix = np.asarray(cost_matrix, dtype=np.float64)

    def distances(self, query, refs):
        from .ot_oracle import exact_ot
        out = np.empty(len(refs))
        sub_rows = self.cost_matrix[query.positions]
        for j, ref in enumerate(refs):
            cost = sub_rows[:, ref.positions]
            out[j] = exact_ot(query.masses, ref.masses, cost).cost
        return out


def _majority_vote(labels: np.ndarray, nearest_label) -> int:
    counts = Counter(labels.tolist())
    top = max(counts.values())
    winners = [lab for lab, c in counts.items() if c == top]
    if len(winners) == 1:
        return winners[0]
    return nearest_label  # vote tie: fall back to the single nearest neighbor


def _classify(provider, corpus, ref_indices, query_indices, k, timings=None):
    ref_docs = [corpus.documents[i] for i in ref_indices]
    ref_labels = np.array([d.label for d in ref_docs])
    preds = np.empty(len(query_indices), dtype=ref_labels.dtype)
    for qi, q in enumerate(query_indices):
        t0 = time.perf_counter()
        dist = provider.distances(corpus.documents[q], ref_docs)
        if timings is not None:
            timings.append(time.perf_counter() - t0)
        order = np.argsort(dist, kind="stable")  # distance ties: lower index
        top = order[:k]
        preds[qi] = _majority_vote(ref_labels[top], ref_labels[order[0]])
    return preds


def _classification_error(provider, corpus, ref_indices, query_indices, k) -> float:
    preds = _classify(provider, corpus, ref_indices, query_indices, k)
    truth = np.array([corpus.documents[q].label for q in query_indices])
    return float(np.mean(preds != truth))


def knn_classify(provider: DistanceProvider, corpus: LabeledCorpus,
                 k: int) -> np.ndarray:
    """Predicted labels for the test split by k-nearest-neighbor vote.

    Majority vote over the k nearest train documents; distance ties keep
    the lower document index, vote ties take the nearest neighbor's label.
    """
    train = corpus.split.train
    test = corpus.split.test
    if not train or not test:
        raise EmptySplit("knn_classify needs nonempty train and test splits")
    if k < 1 or k > len(train):
        raise ValueError(f"k must be in [1, {len(train)}]")
    return _classify(provider, corpus, list(train), list(test), k)


def select_k(provider: DistanceProvider, corpus: LabeledCorpus,
             k_grid=DEFAULT_K_GRID) -> int:
    """k from the grid minimizing validation error; ties to the smaller k."""
    k_grid = sorted(k_grid)
    if not k_grid:
        raise ValueError("k grid is empty")
    train = corpus.split.train
    valid = corpus.split.valid
    if not train or not valid:
        raise EmptySplit("select_k needs nonempty train and valid splits")
    best_k, best_err = None, np.inf
    for k in k_grid:
        if k > len(train):
            continue
        err = _classification_error(provider, corpus, list(train), list(valid), k)
        if err < best_err:
            best_k, best_err = k, err
    if best_k is None:
        raise ValueError("no grid entry is <= the train split size")
    return best_k


@dataclass(frozen=True)
class EvalReport:
    provider_id: str
    error_rate: float
    chosen_k: int
    n_test: int
    timing_mean_s: float
    timing_p50_s: float
    timing_p99_s: float
    config_hash: str

    def as_text(self) -> str:
        return (f"provider={self.provider_id} error_rate={self.error_rate:.4f} "
                f"chosen_k={self.chosen_k} n_test={self.n_test} "
                f"timing_mean_s={self.timing_mean_s:.6f} "
                f"timing_p50_s={self.timing_p50_s:.6f} "
                f"timing_p99_s={self.timing_p99_s:.6f} "
                f"config_hash={self.config_hash}")

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)


def evaluate(provider: DistanceProvider, corpus: LabeledCorpus,
             k: int | None = None, k_grid=DEFAULT_K_GRID,
             config: dict | None = None) -> EvalReport:
    """Classify the test split and summarize error rate and query timings.

    When ``k`` is not given it is selected on the validation split.
    """
    if k is None:
        k = select_k(provider, corpus, k_grid)
    train = list(corpus.split.train)
    test = list(corpus.split.test)
    if not train or not test:
        raise EmptySplit("evaluate needs nonempty train and test splits")
    timings: list[float] = []
    preds = _classify(provider, corpus, train, test, k, timings=timings)
    truth = np.array([corpus.documents[q].label for q in test])
    times = np.asarray(timings)
    return EvalReport(
        provider_id=provider.provider_id,
        error_rate=float(np.mean(preds != truth)),
        chosen_k=k,
        n_test=len(test),
        timing_mean_s=float(times.mean()),
        timing_p50_s=float(np.percentile(times, 50)),
        timing_p99_s=float(np.percentile(times, 99)),
        config_hash=config_hash(config or {}),
    )


@dataclass(frozen=True)
class BenchReport:
    provider_id: str
    batch_size: int
    query_count: int
    n_queries: int
    mean_s: float
    p50_s: float
    p99_s: float
    per_doc_s: float
    bitwise_equal: bool
    config_hash: str
    per_query_s: tuple[float, ...] = field(repr=False, default=())

    def as_text(self) -> str:
        return (f"provider={self.provider_id} batch_size={self.batch_size} "
                f"query_count={self.query_count} n_queries={self.n_queries} "
                f"mean_s={self.mean_s:.6f} p50_s={self.p50_s:.6f} "
                f"p99_s={self.p99_s:.6f} per_doc_s={self.per_doc_s:.3e} "
                f"bitwise_equal={self.bitwise_equal} config_hash={self.config_hash}")


def bench_batch(provider: DistanceProvider, corpus: LabeledCorpus,
                query_count: int = 500, batch_size: int = 1,
                n_queries: int = 100, seed: int = 0,
                config: dict | None = None) -> BenchReport:
    """Time comparisons of sampled queries against ``query_count`` references.

    References are the first ``query_count`` documents; queries are
    sampled with the seed. Each query is compared in ``batch_size``
    chunks; the chunked result vector is checked bitwise against the
    one-by-one loop for the first query.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    docs = corpus.documents
    if len(docs) < query_count:
        raise ValueError(f"corpus has {len(docs)} documents, need {query_count}")
    refs = [docs[i] for i in range(query_count)]
    rng = np.random.default_rng(seed)
    query_idx = rng.integers(0, len(docs), size=n_queries)
    wall: list[float] = []
    bitwise_equal = True
    for qn, qi in enumerate(query_idx):
        query = docs[int(qi)]
        t0 = time.perf_counter()
        chunks = [provider.distances(query, refs[s:s + batch_size])
                  for s in range(0, query_count, batch_size)]
        batched = np.concatenate(chunks)
        wall.append(time.perf_counter() - t0)
        if qn == 0:
            sequential = np.array([provider.distance(query, r) for r in refs])
            bitwise_equal = bool(np.array_equal(batched, sequential))
    times = np.asarray(wall)
    return BenchReport(
        provider_id=provider.provider_id,
        batch_size=batch_size,
        query_count=query_count,
        n_queries=n_queries,
        mean_s=float(times.mean()),
        p50_s=float(np.percentile(times, 50)),
        p99_s=float(np.percentile(times, 99)),
        per_doc_s=float(times.mean() / query_count),
        bitwise_equal=bitwise_equal,
        config_hash=config_hash(config or {}),
        per_query_s=tuple(times.tolist()),
    )


def bench_csv(report: BenchReport) -> str:
    """Per-query timings as CSV for external plotting."""
    lines = ["query,seconds"]
    lines += [f"{i},{t:.9f}" for i, t in enumerate(report.per_query_s)]
    return "\n".join(lines) + "\n"
