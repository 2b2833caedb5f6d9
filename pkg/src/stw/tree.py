"""Hard tree adjacency algebra and tree-Wasserstein distance kernels.

A rooted tree over ``N = n_internal + n_leaf`` nodes is stored through the
two informative blocks of its child-to-parent adjacency matrix ``D_par``:

* ``d1`` (``n_internal x n_internal``): parent-child structure among the
  internal nodes, strictly upper triangular in breadth-first index order.
* ``d2`` (``n_internal x n_leaf``): which internal node each vocabulary
  leaf attaches to, exactly one 1 per column.

Internal nodes occupy indices ``0 .. n_internal-1`` with the root at 0;
leaf ``i`` of the vocabulary is node ``n_internal + i``. Leaves never have
children, so the two lower blocks of ``D_par`` are zero and

    (I - D_par)^-1 = [[inv(I - d1), inv(I - d1) @ d2],
                      [0,           I              ]].

Entry (i, j) of that inverse is 1 exactly when node j lies in the subtree
rooted at node i, which makes the tree-Wasserstein distance between two
bag-of-words vectors the L1 norm of ``edge_lengths * (inverse @ delta)``
with ``delta`` supported on the leaf block. ``inv(I - d1)`` is obtained by
back-substitution on the unit upper-triangular system, which is exact for
0/1 trees, and the leaf block of the embedding is kept implicit.

Distance kernels accumulate in fixed ascending node order (CSR index
order), so batched evaluation is bitwise identical to one-by-one calls.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatch, InvalidTree, TreeTooLarge, VocabularyMismatch
from .measures import Document, Vocabulary

NODE_CAP = 1_000_000

TREE_FORMAT = "stw-tree"
TREE_FORMAT_VERSION = 1


def validate_tree(d_par) -> list[str]:
    """Check the rooted-tree adjacency conditions on an assembled matrix.

    Returns an empty list when the matrix is binary, strictly upper
    triangular, and its column sums are (0, 1, ..., 1); otherwise one
    message per violated condition with offending indices.
    """
    if sp.issparse(d_par):
        mat = d_par.tocoo()
        n, m = mat.shape
        rows, cols, vals = mat.row, mat.col, np.asarray(mat.data, dtype=np.float64)
    else:
        arr = np.asarray(d_par, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError("adjacency must be a 2-D matrix")
        n, m = arr.shape
        rows, cols = np.nonzero(arr)
        vals = arr[rows, cols]
    if n != m:
        return [f"matrix is {n}x{m}, expected square"]
    problems = []
    nonbin = (vals != 0.0) & (vals != 1.0)
    if np.any(nonbin):
        where = list(zip(rows[nonbin][:5].tolist(), cols[nonbin][:5].tolist()))
        problems.append(f"entries outside {{0,1}} at (row, col) {where}")
    lower = (rows >= cols) & (vals != 0.0)
    if np.any(lower):
        where = list(zip(rows[lower][:5].tolist(), cols[lower][:5].tolist()))
        problems.append(f"not strictly upper triangular: nonzeros at (row, col) {where}")
    colsum = np.zeros(n)
    np.add.at(colsum, cols, vals)
    expected = np.ones(n)
    expected[0] = 0.0
    bad = np.nonzero(colsum != expected)[0]
    for j in bad[:10]:
        problems.append(
            f"column {int(j)} sums to {colsum[j]:g}, expected {expected[j]:g}")
    if bad.size > 10:
        problems.append(f"... and {bad.size - 10} more column-sum violations")
    return problems


def _as_csr(mat, name: str) -> sp.csr_matrix:
    if sp.issparse(mat):
        out = mat.tocsr().astype(np.float64)
    else:
        out = sp.csr_matrix(np.asarray(mat, dtype=np.float64))
    out.sum_duplicates()
    out.sort_indices()
    out.eliminate_zeros()
    if out.ndim != 2:
        raise ValueError(f"{name} must be a matrix")
    return out


def _unit_upper_inverse(d1: sp.csr_matrix) -> sp.csr_matrix:
    """Rows of (I - d1)^-1 by back-substitution, bottom row first.

    Requires d1 strictly upper triangular; exact in exact arithmetic, cost
    proportional to the number of nonzeros produced.
    """
    n = d1.shape[0]
    indptr, indices, data = d1.indptr, d1.indices, d1.data
    row_idx: list[np.ndarray] = [None] * n
    row_val: list[np.ndarray] = [None] * n
    for i in range(n - 1, -1, -1):
        acc = {i: 1.0}
        for p in range(indptr[i], indptr[i + 1]):
            j = int(indices[p])
            w = data[p]
            if w == 0.0:
                continue
            if j <= i:
                raise InvalidTree(
                    [f"d1 entry ({i},{j}) is on or below the diagonal"])
            for q, v in zip(row_idx[j], row_val[j]):
                acc[q] = acc.get(int(q), 0.0) + w * v
        idx = np.array(sorted(acc), dtype=np.int64)
        row_idx[i] = idx
        row_val[i] = np.array([acc[int(q)] for q in idx])
    counts = np.array([r.size for r in row_idx], dtype=np.int64)
    out_indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=out_indptr[1:])
    out = sp.csr_matrix(
        (np.concatenate(row_val), np.concatenate(row_idx), out_indptr),
        shape=(n, n))
    out.sort_indices()
    return out


def block_inverse(d1, d2) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Return ``inv(I - d1)`` and ``inv(I - d1) @ d2`` as sparse matrices.

    Assembling these with the identity/zero leaf blocks reproduces the
    inverse of the full ``I - D_par`` exactly.
    """
    d1 = _as_csr(d1, "d1")
    d2 = _as_csr(d2, "d2")
    if d1.shape[0] != d1.shape[1]:
        raise DimensionMismatch(f"d1 is {d1.shape}, expected square")
    if d2.shape[0] != d1.shape[0]:
        raise DimensionMismatch(
            f"d2 has {d2.shape[0]} rows, expected {d1.shape[0]}")
    inv = _unit_upper_inverse(d1)
    c = (inv @ d2).tocsr()
    c.sum_duplicates()
    c.sort_indices()
    return inv, c


def subtree_matrix(d_par) -> np.ndarray:
    """Dense reachability matrix (I - D_par)^-1 of an assembled adjacency.

    Entry (i, j) is 1 iff node j lies in the subtree rooted at node i.
    Intended for desk-scale matrices; raises `InvalidTree` when the input
    fails `validate_tree`.
    """
    problems = validate_tree(d_par)
    if problems:
        raise InvalidTree(problems)
    dense = d_par.toarray() if sp.issparse(d_par) else np.asarray(d_par, dtype=np.float64)
    n = dense.shape[0]
    out = np.zeros((n, n))
    for i in range(n - 1, -1, -1):
        row = np.zeros(n)
        row[i] = 1.0
        for j in np.nonzero(dense[i])[0]:
            row += dense[i, j] * out[j]
        out[i] = row
    return out


def perfect_kary_internal(k: int, depth: int, node_cap: int = NODE_CAP) -> sp.csr_matrix:
    """Adjacency d1 of a perfect k-ary internal tree in breadth-first order.

    Node 0 is the root; node i's children are k*i+1 .. k*i+k. With k >= 2
    the tree has (k**(depth+1) - 1) // (k - 1) nodes; k = 1 gives a chain
    of depth+1 nodes.
    """
    if k < 1:
        raise ValueError("branching factor must be >= 1")
    if depth < 0:
        raise ValueError("depth must be >= 0")
    n = depth + 1 if k == 1 else (k ** (depth + 1) - 1) // (k - 1)
    if n > node_cap:
        raise TreeTooLarge(f"{n} internal nodes exceeds cap {node_cap}")
    rows, cols = [], []
    for i in range(n):
        first = k * i + 1
        if first >= n:
            break
        for c in range(first, min(first + k, n)):
            rows.append(i)
            cols.append(c)
    mat = sp.csr_matrix(
        (np.ones(len(rows)), (rows, cols)), shape=(n, n))
    mat.sort_indices()
    return mat


@dataclass(frozen=True)
class EmbeddingMatrix:
    """Weighted subtree-mass map of a hard tree.

    ``c`` is ``inv(I - d1) @ d2``; together with the implicit identity on
    the leaf block, the tree-Wasserstein distance is the L1 norm of
    ``weights * (assembled matrix @ delta)``. For a hard tree ``c`` is 0/1
    with at most ``(depth + 1) * n_leaf`` nonzeros.
    """

    c: sp.csr_matrix
    inv_d1: sp.csr_matrix
    weights: np.ndarray
    n_internal: int
    n_leaf: int


@dataclass(frozen=True)
class TreeAdjacency:
    """Hard rooted tree: internal block d1, leaf attachment d2, edge lengths.

    ``edge_lengths[v]`` is the length of the edge from node v to its
    parent; the root entry is fixed to 1 (its term always cancels for
    normalized measures). Construction validates the tree conditions.
    """

    n_internal: int
    n_leaf: int
    d1: sp.csr_matrix
    d2: sp.csr_matrix
    edge_lengths: np.ndarray

    def __post_init__(self):
        d1 = _as_csr(self.d1, "d1")
        d2 = _as_csr(self.d2, "d2")
        if d1.shape != (self.n_internal, self.n_internal):
            raise DimensionMismatch(
                f"d1 is {d1.shape}, expected ({self.n_internal}, {self.n_internal})")
        if d2.shape != (self.n_internal, self.n_leaf):
            raise DimensionMismatch(
                f"d2 is {d2.shape}, expected ({self.n_internal}, {self.n_leaf})")
        problems = self._block_validate(d1, d2)
        if problems:
            raise InvalidTree(problems)
        w = np.asarray(self.edge_lengths, dtype=np.float64).reshape(-1).copy()
        n = self.n_internal + self.n_leaf
        if w.shape[0] != n:
            raise DimensionMismatch(
                f"edge_lengths has length {w.shape[0]}, expected {n}")
        if np.any(w < 0):
            raise ValueError("edge lengths must be nonnegative")
        if w[0] != 1.0:
            raise ValueError("root edge length must be 1")
        w.setflags(write=False)
        object.__setattr__(self, "d1", d1)
        object.__setattr__(self, "d2", d2)
        object.__setattr__(self, "edge_lengths", w)

    @staticmethod
    def _block_validate(d1, d2) -> list[str]:
        problems = []
        for name, block in (("d1", d1), ("d2", d2)):
            vals = block.data
            if np.any((vals != 0.0) & (vals != 1.0)):
                problems.append(f"{name} has entries outside {{0,1}}")
        coo = d1.tocoo()
        lower = coo.row >= coo.col
        if np.any(lower & (coo.data != 0.0)):
            problems.append("d1 is not strictly upper triangular")
        col1 = np.asarray(d1.sum(axis=0)).ravel()
        if col1[0] != 0.0:
            problems.append("root column of d1 must be zero")
        bad = np.nonzero(col1[1:] != 1.0)[0]
        if bad.size:
            problems.append(
                f"d1 columns {(bad[:5] + 1).tolist()} do not sum to 1")
        col2 = np.asarray(d2.sum(axis=0)).ravel()
        bad = np.nonzero(col2 != 1.0)[0]
        if bad.size:
            problems.append(f"d2 columns {bad[:5].tolist()} do not sum to 1")
        return problems

    @property
    def n_nodes(self) -> int:
        return self.n_internal + self.n_leaf

    def assembled(self) -> np.ndarray:
        """Dense full adjacency D_par; desk-scale only."""
        n = self.n_nodes
        out = np.zeros((n, n))
        out[:self.n_internal, :self.n_internal] = self.d1.toarray()
        out[:self.n_internal, self.n_internal:] = self.d2.toarray()
        return out

    @cached_property
    def internal_parents(self) -> np.ndarray:
        """Parent index per internal node; -1 for the root."""
        parents = np.full(self.n_internal, -1, dtype=np.int64)
        coo = self.d1.tocoo()
        parents[coo.col] = coo.row
        return parents

    @cached_property
    def leaf_parents(self) -> np.ndarray:
        """Attachment internal node per vocabulary leaf."""
        parents = np.full(self.n_leaf, -1, dtype=np.int64)
        coo = self.d2.tocoo()
        parents[coo.col] = coo.row
        return parents

    @cached_property
    def internal_depths(self) -> np.ndarray:
        depths = np.zeros(self.n_internal, dtype=np.int64)
        parents = self.internal_parents
        for v in range(1, self.n_internal):
            depths[v] = depths[parents[v]] + 1
        return depths

    @property
    def depth(self) -> int:
        """Depth of the internal tree (root at depth 0)."""
        return int(self.internal_depths.max()) if self.n_internal else 0

    @cached_property
    def embedding(self) -> EmbeddingMatrix:
        inv_d1, c = block_inverse(self.d1, self.d2)
        bound = (self.depth + 1) * self.n_leaf
        if c.nnz > bound:
            raise AssertionError(
                f"embedding has {c.nnz} nonzeros, exceeding the "
                f"(depth+1)*n_leaf bound of {bound}")
        return EmbeddingMatrix(c, inv_d1, self.edge_lengths,
                               self.n_internal, self.n_leaf)

    @cached_property
    def _weight_rows(self) -> tuple[sp.csr_matrix, sp.csr_matrix]:
        # 1 x K CSR rows so weighted column sums reduce in ascending node
        # order, independent of how many columns are multiplied at once.
        w_in = sp.csr_matrix(self.edge_lengths[:self.n_internal][None, :])
        w_leaf = sp.csr_matrix(self.edge_lengths[self.n_internal:][None, :])
        w_in.sort_indices()
        w_leaf.sort_indices()
        return w_in, w_leaf

    @cached_property
    def _leaf_chains(self) -> list[np.ndarray]:
        """Internal ancestor chain (attachment .. root) per leaf."""
        parents = self.internal_parents
        chains = []
        for leaf in range(self.n_leaf):
            chain = []
            v = int(self.leaf_parents[leaf])
            while v >= 0:
                chain.append(v)
                v = int(parents[v])
            chains.append(np.array(chain, dtype=np.int64))
        return chains


def _delta_matrix(tree: TreeAdjacency, query: Document, refs) -> np.ndarray:
    if query.n_leaf != tree.n_leaf:
        raise DimensionMismatch(
            f"query has {query.n_leaf} leaves, tree has {tree.n_leaf}")
    neg_q = np.zeros(tree.n_leaf)
    neg_q[query.positions] = -query.masses
    delta = np.empty((tree.n_leaf, len(refs)), order="C")
    for j, ref in enumerate(refs):
        if ref.n_leaf != tree.n_leaf:
            raise DimensionMismatch(
                f"reference {j} has {ref.n_leaf} leaves, tree has {tree.n_leaf}")
        delta[:, j] = neg_q
        delta[ref.positions, j] += ref.masses
    return delta


def batch_distances(tree: TreeAdjacency, query: Document, refs) -> np.ndarray:
    """Tree-Wasserstein distances from ``query`` to each reference document.

    Column j equals ``tree_wasserstein(tree, query, refs[j])`` bitwise:
    every per-column reduction runs in ascending node order regardless of
    how many references are evaluated together.
    """
    refs = list(refs)
    if not refs:
        return np.zeros(0)
    emb = tree.embedding
    delta = _delta_matrix(tree, query, refs)
    u = emb.c @ delta
    w_in, w_leaf = tree._weight_rows
    internal = (w_in @ np.abs(u)).ravel()
    leaf = (w_leaf @ np.abs(delta)).ravel()
    return internal + leaf


def tree_wasserstein(tree: TreeAdjacency, a: Document, b: Document) -> float:
    """Exact tree-Wasserstein distance between two documents.

    Sum over nodes of edge length times the absolute subtree-mass
    difference; symmetric, and zero iff the measures coincide (for
    positive edge lengths).
    """
    return float(batch_distances(tree, a, [b])[0])


def sparse_distance(tree: TreeAdjacency, a: Document, b: Document) -> float:
    """Tree-Wasserstein via the ancestor chains of the words present.

    Touches only the O(s*d) nodes on root paths of the s words in either
    document; agrees with `tree_wasserstein` within accumulation error.
    """
    if a.n_leaf != tree.n_leaf or b.n_leaf != tree.n_leaf:
        raise DimensionMismatch("documents do not match the tree's vocabulary")
    chains = tree._leaf_chains
    w = tree.edge_lengths
    n_in = tree.n_internal
    acc: dict[int, float] = {}
    total = 0.0
    ia = ib = 0
    pos_a, mass_a = a.positions, a.masses
    pos_b, mass_b = b.positions, b.masses
    while ia < pos_a.size or ib < pos_b.size:
        if ib >= pos_b.size or (ia < pos_a.size and pos_a[ia] < pos_b[ib]):
            p, d = int(pos_a[ia]), -float(mass_a[ia])  # ref - query convention
            ia += 1
        elif ia >= pos_a.size or pos_b[ib] < pos_a[ia]:
            p, d = int(pos_b[ib]), float(mass_b[ib])
            ib += 1
        else:
            p = int(pos_a[ia])
            d = float(mass_b[ib]) + (-float(mass_a[ia]))
            ia += 1
            ib += 1
        total += w[n_in + p] * abs(d)
        for v in chains[p]:
            vi = int(v)
            acc[vi] = acc.get(vi, 0.0) + d
    for v in sorted(acc):
        total += w[v] * abs(acc[v])
    return total


def tree_payload(tree: TreeAdjacency, vocab_sha256: str,
                 builder: dict | None = None) -> dict:
    """JSON-ready dict of a tree, tied to a vocabulary hash."""
    def _csr_parts(mat):
        return {
            "indptr": mat.indptr.tolist(),
            "indices": mat.indices.tolist(),
        }

    payload = {
        "format": TREE_FORMAT,
        "version": TREE_FORMAT_VERSION,
        "n_internal": tree.n_internal,
        "n_leaf": tree.n_leaf,
        "d1": _csr_parts(tree.d1),
        "d2": _csr_parts(tree.d2),
        "edge_lengths": tree.edge_lengths.tolist(),
        "vocab_sha256": vocab_sha256,
    }
    if builder:
        payload["builder"] = builder
    return payload


def tree_from_payload(payload: dict, vocabulary: Vocabulary) -> TreeAdjacency:
    if payload.get("format") != TREE_FORMAT:
        raise ValueError("not a tree payload")
    if payload.get("version") != TREE_FORMAT_VERSION:
        raise ValueError(f"unsupported tree format version {payload.get('version')}")
    if payload["vocab_sha256"] != vocabulary.sha256():
        raise VocabularyMismatch(
            "tree was built against a different vocabulary")
    n_in, n_leaf = payload["n_internal"], payload["n_leaf"]

    def _csr(parts, shape):
        indices = np.asarray(parts["indices"], dtype=np.int64)
        return sp.csr_matrix(
            (np.ones(indices.size), indices,
             np.asarray(parts["indptr"], dtype=np.int64)),
            shape=shape)

    return TreeAdjacency(
        n_in, n_leaf,
        _csr(payload["d1"], (n_in, n_in)),
        _csr(payload["d2"], (n_in, n_leaf)),
        np.asarray(payload["edge_lengths"], dtype=np.float64))


def save_tree(tree: TreeAdjacency, path, vocabulary: Vocabulary,
              builder: dict | None = None) -> None:
    """Write a tree to a versioned JSON file tied to the vocabulary hash."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(tree_payload(tree, vocabulary.sha256(), builder), fh)
        fh.write("\n")


def load_tree(path, vocabulary: Vocabulary) -> TreeAdjacency:
    """Load a tree, rejecting files built against a different vocabulary."""
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != TREE_FORMAT:
        raise ValueError(f"not a tree file: {path}")
    return tree_from_payload(payload, vocabulary)
