"""Unsupervised tree-metric baselines over word embeddings.

Quadtree recursively halves a randomly shifted hypercube around the
points until every cell holds at most one distinct embedding; cells are
internal nodes and each edge carries the side length of the child's cell
(a word leaf under a cell at depth L gets side * 2**-(L+1)). Flowtree
computes the transport plan greedily on that tree and prices it with the
Euclidean ground metric, so its value always upper-bounds exact optimal
transport. Tree-sliced Wasserstein averages exact tree distances over
trees sampled by recursive farthest-point clustering, with edges weighted
by distances between parent and child cluster centers.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatch, DuplicatePoints, EmptySet
from .measures import Document, Vocabulary
from .ot_oracle import TransportPlan
from .tree import (TreeAdjacency, tree_from_payload, tree_payload,
                   tree_wasserstein)

QUADTREE_MAX_DEPTH = 30

TREESET_FORMAT = "stw-treeset"
TREESET_FORMAT_VERSION = 1


@dataclass(frozen=True)
class PointCloud:
    """One embedding vector per vocabulary word."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise ValueError("points must be a nonempty (n, dim) array")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        pts = pts.copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class SampledTreeSet:
    """Trees drawn for the sliced tree-Wasserstein average."""

    trees: tuple[TreeAdjacency, ...]

    @property
    def count(self) -> int:
        return len(self.trees)


def _assemble_tree(parent_of, depth_of, attachments, edge_internal,
                   edge_leaf, n_leaf) -> TreeAdjacency:
    """Build a TreeAdjacency from parent pointers produced in BFS order."""
    n_in = len(parent_of)
    rows = [parent_of[v] for v in range(1, n_in)]
    cols = list(range(1, n_in))
    d1 = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_in, n_in))
    leaf_rows = [attachments[l] for l in range(n_leaf)]
    d2 = sp.csr_matrix((np.ones(n_leaf), (leaf_rows, np.arange(n_leaf))),
                       shape=(n_in, n_leaf))
    weights = np.concatenate([edge_internal, edge_leaf])
    weights[0] = 1.0
    return TreeAdjacency(n_in, n_leaf, d1, d2, weights)


def quadtree_build(cloud: PointCloud, seed: int, merge_duplicates: bool = True,
                   max_depth: int = QUADTREE_MAX_DEPTH,
                   shift: np.ndarray | None = None) -> TreeAdjacency:
    """Random-shift recursive hypercube partition of the embeddings.

    Cells become internal nodes in breadth-first order; recursion stops
    when a cell holds one distinct point (or at ``max_depth``, where any
    residual points attach). Words sharing an identical embedding are
    attached to the same cell unless ``merge_duplicates`` is off, in which
    case `DuplicatePoints` is raised. ``shift`` overrides the random
    placement of the enclosing cube (testing hook).
    """
    pts = cloud.points
    groups: dict[bytes, list[int]] = {}
    for w in range(cloud.n_points):
        groups.setdefault(pts[w].tobytes(), []).append(w)
    if not merge_duplicates and any(len(g) > 1 for g in groups.values()):
        dupes = [g for g in groups.values() if len(g) > 1]
        raise DuplicatePoints(f"duplicate embeddings for word groups {dupes[:5]}")
    reps = {key: pts[words[0]] for key, words in groups.items()}

    lo = pts.min(axis=0)
    extent = float((pts.max(axis=0) - lo).max())
    side0 = 2.0 * extent if extent > 0 else 1.0
    rng = np.random.default_rng(seed)
    if shift is None:
        shift = rng.uniform(0.0, side0 / 2.0, size=cloud.dim)
    else:
        shift = np.asarray(shift, dtype=np.float64)
    origin0 = lo - shift

    parent_of = [-1]
    depth_of = [0]
    attachments = [None] * cloud.n_points
    leaf_depths = [0] * cloud.n_points
    queue = deque([(0, origin0, list(groups.keys()))])
    while queue:
        node, origin, keys = queue.popleft()
        depth = depth_of[node]
        if len(keys) == 1 or depth >= max_depth:
            for key in keys:
                for w in groups[key]:
                    attachments[w] = node
                    leaf_depths[w] = depth
            continue
        half = side0 / 2.0 ** (depth + 1)
        children: dict[bytes, list[bytes]] = {}
        child_origin: dict[bytes, np.ndarray] = {}
        for key in keys:
            bits = (reps[key] >= origin + half).astype(np.uint8)
            ck = bits.tobytes()
            children.setdefault(ck, []).append(key)
            if ck not in child_origin:
                child_origin[ck] = origin + bits * half
        for ck in sorted(children):
            child = len(parent_of)
            parent_of.append(node)
            depth_of.append(depth + 1)
            queue.append((child, child_origin[ck], children[ck]))

    depth_arr = np.asarray(depth_of, dtype=np.float64)
    edge_internal = side0 * 2.0 ** -depth_arr
    edge_leaf = side0 * 2.0 ** -(np.asarray(leaf_depths, dtype=np.float64) + 1.0)
    return _assemble_tree(parent_of, depth_of, attachments, edge_internal,
                          edge_leaf, cloud.n_points)


def flowtree_plan(cloud: PointCloud, qtree: TreeAdjacency, a: Document,
                  b: Document) -> TransportPlan:
    """Transport plan on the quadtree, priced on the ground metric.

    Residual supply and demand meet bottom-up; at each node leftovers are
    matched in ascending leaf index (any order is tree-optimal) and priced
    by the Euclidean distance between the words' embeddings. The plan is
    a feasible coupling of a and b.
    """
    if a.n_leaf != qtree.n_leaf or b.n_leaf != qtree.n_leaf:
        raise DimensionMismatch("documents do not match the tree's vocabulary")
    if cloud.n_points != qtree.n_leaf:
        raise DimensionMismatch("point cloud does not match the tree's vocabulary")
    pts = cloud.points
    n_in = qtree.n_internal
    parents = qtree.internal_parents
    supplies: list[list] = [[] for _ in range(n_in)]
    demands: list[list] = [[] for _ in range(n_in)]
    plan = np.zeros((qtree.n_leaf, qtree.n_leaf))
    cost = 0.0

    a_dense = a.dense()
    b_dense = b.dense()
    for leaf in np.union1d(a.positions, b.positions):
        leaf = int(leaf)
        sa, sb = a_dense[leaf], b_dense[leaf]
        matched = min(sa, sb)
        if matched > 0:
            plan[leaf, leaf] += matched
        node = int(qtree.leaf_parents[leaf])
        if sa - matched > 0:
            supplies[node].append((leaf, sa - matched))
        if sb - matched > 0:
            demands[node].append((leaf, sb - matched))

    for node in range(n_in - 1, -1, -1):
        sup = sorted(supplies[node])
        dem = sorted(demands[node])
        si = di = 0
        rest_sup, rest_dem = [], []
        while si < len(sup) and di < len(dem):
            i, ma = sup[si]
            j, mb = dem[di]
            matched = min(ma, mb)
            plan[i, j] += matched
            cost += matched * float(np.linalg.norm(pts[i] - pts[j]))
            if ma <= mb:
                si += 1
                if mb - ma > 0:
                    dem[di] = (j, mb - ma)
                else:
                    di += 1
            else:
                di += 1
                sup[si] = (i, ma - mb)
        rest_sup = sup[si:]
        rest_dem = dem[di:]
        if node > 0:
            up = int(parents[node])
            supplies[up].extend(rest_sup)
            demands[up].extend(rest_dem)
    return TransportPlan(plan, cost)


def flowtree_distance(cloud: PointCloud, qtree: TreeAdjacency, a: Document,
                      b: Document) -> float:
    return flowtree_plan(cloud, qtree, a, b).cost


def _farthest_point_split(pts, members, branching, rng):
    """Greedy k-center split of a cluster; returns (center, members) pairs.

    The first center is a random member; each further center is the
    member farthest from those already chosen (ties to the lowest index).
    """
    members = np.asarray(members)
    first = int(members[rng.integers(0, members.size)])
    centers = [first]
    dist = np.linalg.norm(pts[members] - pts[first], axis=1)
    while len(centers) < min(branching, members.size):
        far = int(np.argmax(dist))
        if dist[far] == 0.0:
            break  # remaining members coincide with a chosen center
        center = int(members[far])
        centers.append(center)
        dist = np.minimum(dist, np.linalg.norm(pts[members] - pts[center], axis=1))
    assign = np.argmin(
        np.stack([np.linalg.norm(pts[members] - pts[c], axis=1) for c in centers]),
        axis=0)
    return [(c, members[assign == k].tolist())
            for k, c in enumerate(centers) if np.any(assign == k)]


def tsw_sample(cloud: PointCloud, n_trees: int, depth: int, branching: int,
               seed: int) -> SampledTreeSet:
    """Sample tree metrics by recursive farthest-point clustering.

    Each tree partitions the cloud into ``branching`` clusters per node
    down to ``depth`` levels; edge lengths are distances between parent
    and child cluster centers, and each word hangs under its deepest
    cluster at the distance to that cluster's center.
    """
    if n_trees <= 0 or depth <= 0 or branching <= 0:
        raise ValueError("n_trees, depth, and branching must be positive")
    pts = cloud.points
    rng = np.random.default_rng(seed)
    trees = []
    for _ in range(n_trees):
        all_members = list(range(cloud.n_points))
        root_center = int(rng.integers(0, cloud.n_points))
        parent_of = [-1]
        depth_of = [0]
        centers = [root_center]
        edge_internal = [1.0]
        attachments = [None] * cloud.n_points
        edge_leaf = [0.0] * cloud.n_points
        queue = deque([(0, all_members)])
        while queue:
            node, members = queue.popleft()
            level = depth_of[node]
            center = centers[node]
            if level >= depth or len(members) == 1:
                for w in members:
                    attachments[w] = node
                    edge_leaf[w] = float(np.linalg.norm(pts[w] - pts[center]))
                continue
            for child_center, child_members in _farthest_point_split(
                    pts, members, branching, rng):
                child = len(parent_of)
                parent_of.append(node)
                depth_of.append(level + 1)
                centers.append(child_center)
                edge_internal.append(
                    float(np.linalg.norm(pts[child_center] - pts[center])))
                queue.append((child, child_members))
        trees.append(_assemble_tree(parent_of, depth_of, attachments,
                                    np.asarray(edge_internal),
                                    np.asarray(edge_leaf), cloud.n_points))
    return SampledTreeSet(tuple(trees))


def tsw_distance(tree_set: SampledTreeSet, a: Document, b: Document) -> float:
    """Mean tree-Wasserstein distance over the sampled trees."""
    if not tree_set.trees:
        raise EmptySet("tree set is empty")
    return float(np.mean([tree_wasserstein(t, a, b) for t in tree_set.trees]))


def save_treeset(tree_set: SampledTreeSet, path, vocabulary: Vocabulary,
                 builder: dict | None = None) -> None:
    vocab_hash = vocabulary.sha256()
    payload = {
        "format": TREESET_FORMAT,
        "version": TREESET_FORMAT_VERSION,
        "trees": [tree_payload(t, vocab_hash, builder) for t in tree_set.trees],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_treeset(path, vocabulary: Vocabulary) -> SampledTreeSet:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != TREESET_FORMAT:
        raise ValueError(f"not a tree-set file: {path}")
    if payload.get("version") != TREESET_FORMAT_VERSION:
        raise ValueError(
            f"unsupported tree-set version {payload.get('version')}")
    return SampledTreeSet(tuple(tree_from_payload(p, vocabulary)
                                for p in payload["trees"]))
