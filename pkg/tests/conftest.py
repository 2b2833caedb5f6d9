"""Shared test helpers: random instances and independent reference oracles.

The oracles here deliberately avoid the library's matrix algebra: subtree
membership comes from explicit graph traversal, distances from the
definition as a sum over nodes, so they can vouch for the fast paths.
"""

import numpy as np
import pytest
import scipy.sparse as sp

from stw.measures import Document
from stw.tree import TreeAdjacency


def random_tree(rng, n_internal, n_leaf, unit_weights=False) -> TreeAdjacency:
    """Random valid tree: internal parents among lower indices, leaves anywhere."""
    rows = [int(rng.integers(0, j)) for j in range(1, n_internal)]
    d1 = sp.csr_matrix((np.ones(n_internal - 1),
                        (rows, np.arange(1, n_internal))),
                       shape=(n_internal, n_internal))
    leaf_rows = rng.integers(0, n_internal, size=n_leaf)
    d2 = sp.csr_matrix((np.ones(n_leaf), (leaf_rows, np.arange(n_leaf))),
                       shape=(n_internal, n_leaf))
    if unit_weights:
        w = np.ones(n_internal + n_leaf)
    else:
        w = rng.uniform(0.1, 2.0, size=n_internal + n_leaf)
        w[0] = 1.0
    return TreeAdjacency(n_internal, n_leaf, d1, d2, w)


def random_simplex_doc(rng, n_leaf, label=None) -> Document:
    masses = rng.dirichlet(np.ones(n_leaf))
    keep = masses > 1e-12
    masses = masses[keep] / masses[keep].sum()
    return Document(n_leaf, np.nonzero(keep)[0], masses, label)


def subtree_leaf_sets(tree: TreeAdjacency):
    """Leaves under each node, found by walking child lists (no algebra)."""
    n_in, n_leaf = tree.n_internal, tree.n_leaf
    children = [[] for _ in range(n_in)]
    for v in range(1, n_in):
        children[int(tree.internal_parents[v])].append(v)
    leaves_at = [[] for _ in range(n_in)]
    for leaf in range(n_leaf):
        leaves_at[int(tree.leaf_parents[leaf])].append(leaf)
    sets = [None] * (n_in + n_leaf)
    for v in range(n_in - 1, -1, -1):
        acc = set(leaves_at[v])
        for c in children[v]:
            acc |= sets[c]
        sets[v] = acc
    for leaf in range(n_leaf):
        sets[n_in + leaf] = {leaf}
    return sets


def tw_by_definition(tree: TreeAdjacency, a: Document, b: Document) -> float:
    """Tree-Wasserstein as the literal sum over nodes of weighted
    absolute subtree-mass differences."""
    sets = subtree_leaf_sets(tree)
    da, db = a.dense(), b.dense()
    total = 0.0
    for v, leaves in enumerate(sets):
        idx = sorted(leaves)
        total += tree.edge_lengths[v] * abs(da[idx].sum() - db[idx].sum())
    return total


def leaf_path_costs(tree: TreeAdjacency) -> np.ndarray:
    """Pairwise tree path lengths between leaves, via parent-chain walks."""
    n_in, n_leaf = tree.n_internal, tree.n_leaf
    w = tree.edge_lengths

    def chain(leaf):
        # (node, cumulative cost from leaf to just above node)
        nodes = [n_in + leaf]
        costs = [w[n_in + leaf]]
        v = int(tree.leaf_parents[leaf])
        while v >= 0:
            nodes.append(v)
            costs.append(costs[-1] + w[v])
            v = int(tree.internal_parents[v]) if v > 0 else -1
        return nodes, costs

    chains = [chain(l) for l in range(n_leaf)]
    out = np.zeros((n_leaf, n_leaf))
    for i in range(n_leaf):
        nodes_i, costs_i = chains[i]
        pos_i = {v: k for k, v in enumerate(nodes_i)}
        for j in range(i + 1, n_leaf):
            nodes_j, costs_j = chains[j]
            for k, v in enumerate(nodes_j):
                if v in pos_i:
                    ki = pos_i[v]
                    # cost up to (not including) the shared ancestor's edge
                    ci = costs_i[ki - 1] if ki > 0 else 0.0
                    cj = costs_j[k - 1] if k > 0 else 0.0
                    out[i, j] = out[j, i] = ci + cj
                    break
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)
