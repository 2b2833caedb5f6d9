"""Supervised tree-Wasserstein document distances.

Learns a tree metric over a vocabulary from labeled documents via a
differentiable soft tree-Wasserstein distance, serves fast exact
tree-Wasserstein distances in batch, and ships unsupervised tree
baselines (Quadtree, Flowtree, tree-sliced Wasserstein) plus a
desk-scale exact optimal-transport oracle for verification.
"""

from .baselines import (PointCloud, SampledTreeSet, flowtree_distance,
                        flowtree_plan, quadtree_build, tsw_distance, tsw_sample)
from .data_io import (EmbeddingTable, INSTRUMENT_WORDS, load_corpus,
                      load_embeddings, load_splits, save_corpus, save_splits,
                      synthetic_instruments)
from .evaluation import (BenchReport, DistanceProvider, EvalReport,
                         FlowtreeProvider, HardTreeProvider, OracleProvider,
                         SoftTreeProvider, TSWProvider, bench_batch, evaluate,
                         knn_classify, select_k)
from .measures import (Document, LabeledCorpus, Split, Vocabulary,
                       normalize_counts, scale_measure, validate_corpus)
from .ot_oracle import TransportPlan, exact_ot, sinkhorn
from .stw_train import (AdamState, PairBatch, SoftTreeModel, TrainConfig,
                        TrainResult, adam_step, contrastive_loss, harden,
                        load_checkpoint, loss_gradient, make_pair_batch,
                        save_checkpoint, select_margin, smooth_abs,
                        soft_tree_wasserstein, train)
from .tree import (EmbeddingMatrix, TreeAdjacency, batch_distances,
                   block_inverse, load_tree, perfect_kary_internal, save_tree,
                   sparse_distance, subtree_matrix, tree_wasserstein,
                   validate_tree)

__version__ = "0.1.0"

__all__ = [
    "AdamState", "BenchReport", "DistanceProvider", "Document",
    "EmbeddingMatrix", "EmbeddingTable", "EvalReport", "FlowtreeProvider",
    "HardTreeProvider", "INSTRUMENT_WORDS", "LabeledCorpus", "OracleProvider",
    "PairBatch", "PointCloud", "SampledTreeSet", "SoftTreeModel",
    "SoftTreeProvider", "Split", "TSWProvider", "TrainConfig", "TrainResult",
    "TransportPlan", "TreeAdjacency", "Vocabulary", "adam_step",
    "batch_distances", "bench_batch", "block_inverse", "contrastive_loss",
    "evaluate", "exact_ot", "flowtree_distance", "flowtree_plan", "harden",
    "knn_classify", "load_checkpoint", "load_corpus", "load_embeddings",
    "load_splits", "load_tree", "loss_gradient", "make_pair_batch",
    "normalize_counts", "perfect_kary_internal", "quadtree_build",
    "save_checkpoint", "save_corpus", "save_splits", "save_tree",
    "scale_measure", "select_k", "select_margin", "sinkhorn", "smooth_abs",
    "soft_tree_wasserstein", "sparse_distance", "subtree_matrix", "train",
    "tree_wasserstein", "tsw_distance", "tsw_sample", "validate_corpus",
    "validate_tree",
]
