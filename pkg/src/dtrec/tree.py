"""Balanced k-ary index trees over item embeddings and path-code similarity.

Each tree node runs k-means on the embeddings of its items and recurses until
a node holds at most ``m`` items. An item's path code is the sequence of
child-slot indices along its root-to-leaf walk; similarity between two items
is their shared prefix length divided by the shorter code length.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

KMEANS_MAX_ITERS = 50

PathCode = tuple[int, ...]


@dataclass
class TreeNode:
    centroid: np.ndarray
    children: list[int] = field(default_factory=list)  # node ids, slot order
    items: list[int] = field(default_factory=list)  # leaves only

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass
class IndexTree:
    nodes: list[TreeNode]
    branching: int
    leaf_threshold: int
    root: int = 0

    @property
    def depth(self) -> int:
        codes = path_codes(self)
        return max(len(c) for c in codes.values())

    def leaves(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.is_leaf]

    def check_invariants(self, item_count: int) -> None:
        seen: set[int] = set()
        for node in self.nodes:
            if node.is_leaf:
                if not 1 <= len(node.items) <= self.leaf_threshold:
                    raise AssertionError(f"leaf size {len(node.items)} out of bounds")
                if seen & set(node.items):
                    raise AssertionError("leaves overlap")
                seen.update(node.items)
            elif not 2 <= len(node.children) <= self.branching:
                raise AssertionError(f"internal node with {len(node.children)} children")
        if seen != set(range(item_count)):
            raise AssertionError("leaves do not partition the item set")


def _kmeans(X: np.ndarray, n_clusters: int, rng: np.random.Generator) -> np.ndarray:
    """Plain Lloyd iterations with k-means++ seeding; returns labels.

    Empty clusters are re-seeded from the point farthest from its centroid.
    """
    n = X.shape[0]
    # k-means++ seeding.
    centers = np.empty((n_clusters, X.shape[1]))
    first = rng.integers(n)
    centers[0] = X[first]
    dist2 = ((X - centers[0]) ** 2).sum(axis=1)
    for c in range(1, n_clusters):
        total = dist2.sum()
        if total <= 0:
            centers[c] = X[rng.integers(n)]
        else:
            centers[c] = X[np.searchsorted(np.cumsum(dist2 / total), rng.random())]
        dist2 = np.minimum(dist2, ((X - centers[c]) ** 2).sum(axis=1))

    labels = np.zeros(n, dtype=np.int64)
    for _ in range(KMEANS_MAX_ITERS):
        d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = d2.argmin(axis=1)
        for c in range(n_clusters):
            mask = new_labels == c
            if mask.any():
                centers[c] = X[mask].mean(axis=0)
            else:
                # Re-seed from the farthest point.
                far = int(d2[np.arange(n), new_labels].argmax())
                centers[c] = X[far]
                new_labels[far] = c
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return labels


def build_kary_tree(E: np.ndarray, k: int, m: int, seed: int = 0) -> IndexTree:
    """Recursively partition embedding rows until every leaf holds <= m items.

    Children are ordered by descending cluster size (ties by smallest
    contained item id) so codes are deterministic for a fixed seed. Each
    node's k-means uses its own rng derived from (seed, path).
    """
    if k < 2:
        raise ValueError(f"branching k must be >= 2, got {k}")
    if m < 1:
        raise ValueError(f"leaf threshold m must be >= 1, got {m}")
    E = np.asarray(E, dtype=np.float64)
    if E.ndim != 2 or E.shape[0] == 0:
        raise ValueError(f"embedding matrix must be 2-D and non-empty, got {E.shape}")

    nodes: list[TreeNode] = []

    def build(items: np.ndarray, path: tuple[int, ...]) -> int:
        node_id = len(nodes)
        nodes.append(TreeNode(centroid=E[items].mean(axis=0)))
        if items.size <= m:
            nodes[node_id].items = [int(i) for i in items]
            return node_id

        X = E[items]
        distinct = np.unique(X, axis=0).shape[0]
        if distinct == 1:
            # All embeddings identical: k-means cannot separate; round-robin
            # on item id keeps the recursion shrinking.
            logger.info("build_kary_tree: degenerate node of %d identical points", items.size)
            ordered = np.sort(items)
            groups = [ordered[g::k] for g in range(k) if ordered[g::k].size]
        else:
            n_clusters = min(k, int(distinct), items.size)
            rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=path))
            labels = _kmeans(X, n_clusters, rng)
            groups = [items[labels == c] for c in range(n_clusters)]
            groups = [g for g in groups if g.size]
            if len(groups) < 2:
                logger.info("build_kary_tree: k-means collapsed, falling back to round-robin")
                ordered = np.sort(items)
                groups = [ordered[g::k] for g in range(k) if ordered[g::k].size]

        groups.sort(key=lambda g: (-g.size, int(g.min())))
        child_ids = [build(g, path + (slot,)) for slot, g in enumerate(groups)]
        nodes[node_id].children = child_ids
        return node_id

    build(np.arange(E.shape[0]), ())
    return IndexTree(nodes=nodes, branching=k, leaf_threshold=m)


def path_codes(tree: IndexTree) -> dict[int, PathCode]:
    """Child-slot sequence along each item's root-to-leaf walk.

    A single-leaf tree (whole item set fits in the root) yields code (0,)
    for every item.
    """
    root = tree.nodes[tree.root]
    if root.is_leaf:
        return {int(i): (0,) for i in root.items}
    codes: dict[int, PathCode] = {}
    stack: list[tuple[int, PathCode]] = [(tree.root, ())]
    while stack:
        node_id, prefix = stack.pop()
        node = tree.nodes[node_id]
        if node.is_leaf:
            for i in node.items:
                codes[int(i)] = prefix
        else:
            for slot, child in enumerate(node.children):
                stack.append((child, prefix + (slot,)))
    return codes


def lcp_similarity(a: Sequence[int], b: Sequence[int]) -> float:
    """Shared prefix length divided by the shorter code length, in [0, 1]."""
    if not a or not b:
        raise ValueError("path codes must be non-empty")
    shorter = min(len(a), len(b))
    l = 0
    while l < shorter and a[l] == b[l]:
        l += 1
    return l / shorter


class PathCodeTable:
    """Padded array view of per-item codes for vectorized similarity lookups."""

    def __init__(self, codes: Mapping[int, PathCode], item_count: int | None = None):
        if item_count is None:
            item_count = max(codes) + 1
        if set(codes) != set(range(item_count)):
            raise ValueError("codes must cover every item id exactly once")
        width = max(len(c) for c in codes.values())
        self.padded = np.full((item_count, width), -1, dtype=np.int64)
        self.lengths = np.zeros(item_count, dtype=np.int64)
        for i, code in codes.items():
            self.padded[i, : len(code)] = code
            self.lengths[i] = len(code)

    def similarity(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Elementwise normalized-LCP similarity for broadcastable id arrays."""
        a = np.asarray(a)
        b = np.asarray(b)
        pa, pb = self.padded[a], self.padded[b]
        shorter = np.minimum(self.lengths[a], self.lengths[b])
        eq = pa == pb
        prefix = np.cumprod(eq, axis=-1)
        pos = np.arange(self.padded.shape[1])
        valid = pos < shorter[..., None]
        return (prefix * valid).sum(axis=-1) / shorter


# ---------------------------------------------------------------------------
# Persistence: one `item<TAB>c:...<TAB>s:...` line per item plus a topology
# file; the codes file is the contract consumed by classification and
# sampling, and the same `c:`/`s:` rendering is embedded in prompts.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DualCodes:
    collab: dict[int, PathCode]
    semantic: dict[int, PathCode]

    def __post_init__(self) -> None:
        if set(self.collab) != set(self.semantic):
            raise ValueError("collaborative and semantic codes cover different items")

    @property
    def item_count(self) -> int:
        return len(self.collab)


def format_code(code: PathCode) -> str:
    return ",".join(str(c) for c in code)


def write_codes(path: str | Path, codes: DualCodes, fingerprint: str | None = None) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        if fingerprint:
            fh.write(f"# fingerprint={fingerprint}\n")
        for i in sorted(codes.collab):
            fh.write(f"{i}\tc:{format_code(codes.collab[i])}\ts:{format_code(codes.semantic[i])}\n")


def read_codes(path: str | Path, expected_fingerprint: str | None = None) -> DualCodes:
    collab: dict[int, PathCode] = {}
    semantic: dict[int, PathCode] = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("# fingerprint="):
                found = line.split("=", 1)[1]
                if expected_fingerprint is not None and found != expected_fingerprint:
                    raise ValueError(
                        f"fingerprint mismatch in {path}: artifact {found} vs config "
                        f"{expected_fingerprint}"
                    )
                continue
            if not line or line.startswith("#"):
                continue
            item_s, c_s, s_s = line.split("\t")
            item = int(item_s)
            collab[item] = tuple(int(x) for x in c_s[2:].split(","))
            semantic[item] = tuple(int(x) for x in s_s[2:].split(","))
    return DualCodes(collab, semantic)


def tree_to_json(tree: IndexTree) -> dict:
    return {
        "branching": tree.branching,
        "leaf_threshold": tree.leaf_threshold,
        "root": tree.root,
        "nodes": [
            {
                "children": node.children,
                "items": node.items,
                "centroid": [float(x) for x in node.centroid],
            }
            for node in tree.nodes
        ],
    }


def write_trees(
    path: str | Path,
    collab_tree: IndexTree,
    semantic_tree: IndexTree,
    fingerprint: str | None = None,
) -> None:
    payload = {
        "fingerprint": fingerprint,
        "collaborative": tree_to_json(collab_tree),
        "semantic": tree_to_json(semantic_tree),
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n")
