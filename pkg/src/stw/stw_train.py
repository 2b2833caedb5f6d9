"""Differentiable tree-metric learning over leaf attachments.

The learnable object is a logit matrix ``theta`` (internal nodes x leaves)
whose column softmax gives the probability that each vocabulary leaf hangs
under each internal node. The internal tree ``d1`` and all edge lengths
stay fixed, so the relaxed adjacency always satisfies the rooted-tree
column constraints and ``inv(I - d1)`` is computed once.

The soft tree-Wasserstein distance replaces hard subtree membership with
those attachment probabilities and the absolute value with the smooth even
surrogate ``|x|_a = x * tanh(a*x/2)``, which converges to |x| as the
sharpness ``a`` grows. It is symmetric and vanishes on identical inputs
but is not a metric (no triangle inequality).

Training minimizes a contrastive objective over labeled document pairs:
mean soft distance of same-label pairs minus mean margin-clamped soft
distance of different-label pairs, by Adam on analytic gradients. Mass
vectors are multiplied by a fixed scale during training so entries of
sparse bags do not sit near zero. Hardening takes each leaf's most
probable parent, yielding a discrete tree for the exact kernels.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import asdict, dataclass, replace
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import (DegenerateLabels, DimensionMismatch, EmptyBatch,
                     EmptySplit, VocabularyMismatch)
from .measures import Document, LabeledCorpus, Vocabulary, scale_measure
from .tree import TreeAdjacency, _as_csr, _unit_upper_inverse, perfect_kary_internal

CHECKPOINT_FORMAT = "stw-checkpoint"
CHECKPOINT_FORMAT_VERSION = 1

THETA_INIT_SCALE = 0.01  # near-uniform attachments, avoids dead gradients


def smooth_abs(x, alpha: float):
    """Smooth even approximation of |x| with sharpness ``alpha``.

    Evaluated as ``|x| * tanh(alpha*|x|/2)``, the overflow-safe form of
    ``x*(exp(a*x) - exp(-a*x)) / (2 + exp(a*x) + exp(-a*x))``; exact at 0,
    converges to |x| as alpha grows, and bitwise invariant under sign
    flips of ``x``.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    ax = np.abs(x)
    return ax * np.tanh(0.5 * alpha * ax)


def smooth_abs_grad(x, alpha: float):
    """Derivative of `smooth_abs` with respect to x."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    ax = np.abs(x)
    t = np.tanh(0.5 * alpha * ax)
    return np.sign(x) * (t + 0.5 * alpha * ax * (1.0 - t * t))


def column_softmax(theta: np.ndarray) -> np.ndarray:
    shifted = theta - theta.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


@dataclass(frozen=True)
class SoftTreeModel:
    """Fixed internal tree plus trainable leaf-attachment logits.

    ``d2`` (column softmax of theta) and the soft embedding
    ``inv(I - d1) @ d2`` are derived lazily and cached; ``with_theta``
    returns a model sharing the fixed parts.
    """

    d1: sp.csr_matrix
    inv_d1: sp.csr_matrix
    theta: np.ndarray
    alpha: float
    edge_lengths: np.ndarray

    @classmethod
    def from_theta(cls, d1, theta: np.ndarray, alpha: float) -> "SoftTreeModel":
        d1 = _as_csr(d1, "d1")
        theta = np.asarray(theta, dtype=np.float64)
        if theta.ndim != 2 or theta.shape[0] != d1.shape[0]:
            raise DimensionMismatch(
                f"theta is {theta.shape}, expected ({d1.shape[0]}, n_leaf)")
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        inv_d1 = _unit_upper_inverse(d1)
        n = d1.shape[0] + theta.shape[1]
        return cls(d1, inv_d1, theta, float(alpha), np.ones(n))

    def with_theta(self, theta: np.ndarray) -> "SoftTreeModel":
        if theta.shape != self.theta.shape:
            raise DimensionMismatch("theta shape changed")
        return SoftTreeModel(self.d1, self.inv_d1, np.asarray(theta, float),
                             self.alpha, self.edge_lengths)

    @property
    def n_internal(self) -> int:
        return self.d1.shape[0]

    @property
    def n_leaf(self) -> int:
        return self.theta.shape[1]

    @cached_property
    def d2(self) -> np.ndarray:
        return column_softmax(self.theta)

    @cached_property
    def c_soft(self) -> np.ndarray:
        return self.inv_d1 @ self.d2

    @cached_property
    def _inv_d1_t(self) -> sp.csr_matrix:
        out = self.inv_d1.T.tocsr()
        out.sort_indices()
        return out


def soft_tree_wasserstein(model: SoftTreeModel, a: Document, b: Document) -> float:
    """Soft tree-Wasserstein distance between two documents.

    Internal-node terms use the soft embedding, leaf terms the raw mass
    difference; both pass through `smooth_abs`. Symmetric bitwise and zero
    for identical measures.
    """
    if a.n_leaf != model.n_leaf or b.n_leaf != model.n_leaf:
        raise DimensionMismatch("documents do not match the model's vocabulary")
    delta = b.dense() - a.dense()
    u = model.c_soft @ delta
    w_in = model.edge_lengths[:model.n_internal]
    w_leaf = model.edge_lengths[model.n_internal:]
    return float(w_in @ smooth_abs(u, model.alpha)
                 + w_leaf @ smooth_abs(delta, model.alpha))


@dataclass(frozen=True)
class PairBatch:
    """Document index pairs split by label equality."""

    positive_pairs: tuple[tuple[int, int], ...]
    negative_pairs: tuple[tuple[int, int], ...]


def make_pair_batch(corpus: LabeledCorpus, indices) -> PairBatch:
    """All within-batch pairs of the given documents, split by label."""
    indices = list(indices)
    pos, neg = [], []
    for s, i in enumerate(indices):
        li = corpus.documents[i].label
        for j in indices[s + 1:]:
            if li == corpus.documents[j].label:
                pos.append((i, j))
            else:
                neg.append((i, j))
    return PairBatch(tuple(pos), tuple(neg))


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for contrastive tree-metric training.

    The default margin sits where the clamp still lets different-label
    pairs push against the fixed leaf-mass terms of scaled bags; smaller
    margins silence every negative pair and the attachments collapse.
    """

    margin: float = 7.5
    learning_rate: float = 0.1
    batch_size: int = 100
    epochs: int = 30
    mass_scale: float = 5.0
    alpha: float = 20.0
    seed: int = 0
    validation_fraction: float = 0.2
    margin_grid: tuple[float, ...] = (0.1, 0.5, 1.0, 5.0)
    kary: int = 5
    depth: int = 5

    def __post_init__(self):
        for name in ("margin", "learning_rate", "batch_size", "epochs",
                     "mass_scale", "alpha"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (0.0 < self.validation_fraction < 1.0):
            raise ValueError("validation_fraction must lie in (0, 1)")
        if self.kary < 1 or self.depth < 0:
            raise ValueError("kary must be >= 1 and depth >= 0")


def _check_pair_labels(corpus, batch):
    for i, j in batch.positive_pairs:
        if corpus.documents[i].label != corpus.documents[j].label:
            raise ValueError(f"pair ({i},{j}) listed as positive has differing labels")
    for i, j in batch.negative_pairs:
        if corpus.documents[i].label == corpus.documents[j].label:
            raise ValueError(f"pair ({i},{j}) listed as negative has equal labels")


def _pair_deltas(corpus, pairs, scale: float) -> np.ndarray:
    n_leaf = len(corpus.vocabulary)
    delta = np.zeros((n_leaf, len(pairs)))
    for p, (i, j) in enumerate(pairs):
        delta[:, p] = (scale_measure(corpus.documents[i], scale)
                       - scale_measure(corpus.documents[j], scale))
    return delta


def _loss_and_gradient(model: SoftTreeModel, batch: PairBatch,
                       corpus: LabeledCorpus, cfg: TrainConfig,
                       want_gradient: bool):
    """Contrastive loss and, optionally, its analytic gradient over theta.

    Negative pairs whose soft distance reaches the margin are clamped and
    contribute zero gradient (the boundary case itself is treated as
    clamped; it is a measure-zero event).
    """
    _check_pair_labels(corpus, batch)
    n_pos, n_neg = len(batch.positive_pairs), len(batch.negative_pairs)
    if n_pos == 0 and n_neg == 0:
        raise EmptyBatch("batch has neither positive nor negative pairs")
    if n_pos == 0:
        warnings.warn("pair batch has no positive pairs; that side contributes 0")
    if n_neg == 0:
        warnings.warn("pair batch has no negative pairs; that side contributes 0")
    pairs = batch.positive_pairs + batch.negative_pairs
    delta = _pair_deltas(corpus, pairs, cfg.mass_scale)
    u = model.c_soft @ delta
    w_in = model.edge_lengths[:model.n_internal]
    w_leaf = model.edge_lengths[model.n_internal:]
    values = w_in @ smooth_abs(u, model.alpha) + w_leaf @ smooth_abs(delta, model.alpha)
    pos_vals = values[:n_pos]
    neg_vals = values[n_pos:]
    loss = 0.0
    if n_pos:
        loss += float(pos_vals.mean())
    if n_neg:
        loss -= float(np.minimum(neg_vals, cfg.margin).mean())
    if not want_gradient:
        return loss, None
    coeff = np.zeros(len(pairs))
    if n_pos:
        coeff[:n_pos] = 1.0 / n_pos
    if n_neg:
        coeff[n_pos:] = np.where(neg_vals < cfg.margin, -1.0 / n_neg, 0.0)
    s = (w_in[:, None] * smooth_abs_grad(u, model.alpha)) * coeff[None, :]
    g_d2 = (model._inv_d1_t @ s) @ delta.T
    d2 = model.d2
    grad = d2 * (g_d2 - np.sum(g_d2 * d2, axis=0, keepdims=True))
    return loss, grad


def contrastive_loss(model: SoftTreeModel, batch: PairBatch,
                     corpus: LabeledCorpus, cfg: TrainConfig) -> float:
    """Mean positive-pair soft distance minus mean margin-clamped
    negative-pair soft distance, on mass-scaled measures."""
    loss, _ = _loss_and_gradient(model, batch, corpus, cfg, want_gradient=False)
    return loss


def loss_gradient(model: SoftTreeModel, batch: PairBatch,
                  corpus: LabeledCorpus, cfg: TrainConfig) -> np.ndarray:
    """Analytic d(loss)/d(theta) through the softmax and the fixed
    linear subtree map."""
    _, grad = _loss_and_gradient(model, batch, corpus, cfg, want_gradient=True)
    return grad


@dataclass
class AdamState:
    """First/second moment estimates and step counter."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, shape) -> "AdamState":
        return cls(np.zeros(shape), np.zeros(shape), 0)


def adam_step(theta: np.ndarray, grad: np.ndarray, state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, layer_scale=None):
    """One Adam update with bias correction; returns (theta, state).

    ``layer_scale``, if given, maps (theta, update direction) to a scalar
    multiplier on the learning rate - the hook where layer-wise scaling
    schemes can plug in.
    """
    if grad.shape != theta.shape:
        raise DimensionMismatch("gradient shape does not match theta")
    t = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    update = m_hat / (np.sqrt(v_hat) + eps)
    if layer_scale is not None:
        lr = lr * layer_scale(theta, update)
    return theta - lr * update, AdamState(m, v, t)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    valid_loss: float
    wall_time_s: float


@dataclass(frozen=True)
class TrainResult:
    model: SoftTreeModel
    log: tuple[EpochRecord, ...]
    best_epoch: int
    config: TrainConfig


def _resolve_validation(corpus: LabeledCorpus, cfg: TrainConfig):
    """Deterministic (pool, validation) document indices for training.

    Uses the corpus valid split when present, otherwise carves
    ``validation_fraction`` of the train split with the config seed.
    """
    train_idx = list(corpus.split.train)
    if not train_idx:
        raise EmptySplit("corpus has no train split")
    if corpus.split.valid:
        return train_idx, list(corpus.split.valid)
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(len(train_idx))
    n_val = max(1, int(round(cfg.validation_fraction * len(train_idx))))
    if n_val >= len(train_idx):
        raise DegenerateLabels("train split too small to carve validation from")
    val = [train_idx[p] for p in perm[:n_val]]
    pool = [train_idx[p] for p in perm[n_val:]]
    return pool, val


def train(corpus: LabeledCorpus, cfg: TrainConfig) -> TrainResult:
    """Learn leaf attachments by mini-batch contrastive descent.

    Each epoch shuffles the training pool and walks it in ``batch_size``
    chunks; every chunk contributes all its within-chunk label pairs to
    one Adam step. The returned model carries the parameters with the
    lowest validation loss seen across epochs. Bit-reproducible for a
    fixed seed and thread count.
    """
    pool, val_idx = _resolve_validation(corpus, cfg)
    pool_labels = {corpus.documents[i].label for i in pool}
    if len(pool_labels) < 2:
        raise DegenerateLabels("training pool contains a single class")
    rng = np.random.default_rng(cfg.seed)
    d1 = perfect_kary_internal(cfg.kary, cfg.depth)
    n_leaf = len(corpus.vocabulary)
    theta = rng.uniform(-THETA_INIT_SCALE, THETA_INIT_SCALE,
                        size=(d1.shape[0], n_leaf))
    model = SoftTreeModel.from_theta(d1, theta, cfg.alpha)
    state = AdamState.zeros(theta.shape)
    val_batch = make_pair_batch(corpus, val_idx)
    log = []
    best_loss = np.inf
    best_theta = theta
    best_epoch = 0
    pool = np.asarray(pool)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = pool[rng.permutation(pool.size)]
        epoch_losses = []
        for start in range(0, order.size, cfg.batch_size):
            chunk = order[start:start + cfg.batch_size]
            if chunk.size < 2:
                continue
            batch = make_pair_batch(corpus, chunk.tolist())
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                loss, grad = _loss_and_gradient(model, batch, corpus, cfg, True)
            theta, state = adam_step(theta, grad, state, cfg.learning_rate)
            model = model.with_theta(theta)
            epoch_losses.append(loss)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            val_loss = contrastive_loss(model, val_batch, corpus, cfg)
        log.append(EpochRecord(epoch, float(np.mean(epoch_losses)), val_loss,
                               time.perf_counter() - t0))
        if val_loss < best_loss:
            best_loss = val_loss
            best_theta = theta
            best_epoch = epoch
    return TrainResult(model.with_theta(best_theta), tuple(log), best_epoch, cfg)


def select_margin(corpus: LabeledCorpus, cfg: TrainConfig) -> float:
    """Pick the margin with the lowest validation 1-NN error.

    Trains once per candidate on the training pool (the validation
    documents are the same carve-out `train` uses); ties go to the
    smaller margin.
    """
    if not cfg.margin_grid:
        raise ValueError("margin_grid is empty")
    from .evaluation import HardTreeProvider, _classification_error

    pool, val_idx = _resolve_validation(corpus, cfg)
    best_m, best_err = None, np.inf
    for m in sorted(cfg.margin_grid):
        result = train(corpus, replace(cfg, margin=m))
        provider = HardTreeProvider(harden(result.model))
        err = _classification_error(provider, corpus, pool, val_idx, k=1)
        if err < best_err:
            best_m, best_err = m, err
    return best_m


def harden(model: SoftTreeModel) -> TreeAdjacency:
    """Discrete tree with each leaf at its most probable parent.

    Ties resolve to the lowest internal index; edge lengths are all ones.
    The result satisfies the rooted-tree conditions by construction.
    """
    d2_soft = model.d2
    rows = np.argmax(d2_soft, axis=0)
    n_in, n_leaf = d2_soft.shape
    d2 = sp.csr_matrix((np.ones(n_leaf), (rows, np.arange(n_leaf))),
                       shape=(n_in, n_leaf))
    return TreeAdjacency(n_in, n_leaf, model.d1, d2, np.ones(n_in + n_leaf))


def save_checkpoint(path, result: TrainResult, vocabulary: Vocabulary) -> None:
    """Write model, config, and training log as one versioned JSON file."""
    cfg = result.config
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_FORMAT_VERSION,
        "kary": cfg.kary,
        "depth": cfg.depth,
        "alpha": result.model.alpha,
        "vocab_sha256": vocabulary.sha256(),
        "theta": result.model.theta.tolist(),
        "config": asdict(cfg),
        "best_epoch": result.best_epoch,
        "log": [asdict(r) for r in result.log],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_checkpoint(path, vocabulary: Vocabulary | None = None):
    """Load a checkpoint; verifies the vocabulary hash when one is given.

    Returns (model, payload) where payload holds the raw config and log.
    """
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a checkpoint file: {path}")
    if payload.get("version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(
            f"unsupported checkpoint version {payload.get('version')}")
    if vocabulary is not None and payload["vocab_sha256"] != vocabulary.sha256():
        raise VocabularyMismatch(
            "checkpoint was trained against a different vocabulary")
    d1 = perfect_kary_internal(payload["kary"], payload["depth"])
    theta = np.asarray(payload["theta"], dtype=np.float64)
    model = SoftTreeModel.from_theta(d1, theta, payload["alpha"])
    return model, payload
