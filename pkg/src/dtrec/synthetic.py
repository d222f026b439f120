"""Synthetic block-structured interaction data for desk-scale experiments.

Users and items split into two disjoint blocks with no cross-block
interactions. Within a block, items form equal-size sub-clusters and every
user draws a preference profile over those sub-clusters (one primary, one
secondary, a thin tail), so interactions carry a graded taste signal while
the aggregate within-block density stays at the requested level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Interaction


@dataclass(frozen=True)
class SyntheticBlocks:
    interactions: tuple[Interaction, ...]
    user_block: np.ndarray
    item_block: np.ndarray
    item_cluster: np.ndarray  # global sub-cluster id per item
    cluster_weights: np.ndarray  # user x cluster preference weights


def _base_weights(subclusters: int) -> np.ndarray:
    if subclusters < 1:
        raise ValueError("subclusters must be >= 1")
    if subclusters == 1:
        return np.array([1.0])
    if subclusters == 2:
        return np.array([0.7, 0.3])
    w = np.full(subclusters, 0.15 / (subclusters - 2))
    w[0], w[1] = 0.6, 0.25
    return w


def two_block_dataset(
    user_count: int = 200,
    item_count: int = 200,
    density: float = 0.3,
    subclusters: int = 4,
    seed: int = 0,
) -> SyntheticBlocks:
    """Two user/item blocks with sub-cluster taste structure inside each."""
    if user_count % 2 or item_count % 2:
        raise ValueError("user_count and item_count must be even")
    items_per_block = item_count // 2
    if items_per_block % subclusters:
        raise ValueError("items per block must divide evenly into subclusters")
    rng = np.random.default_rng(seed)

    user_block = np.repeat([0, 1], user_count // 2)
    item_block = np.repeat([0, 1], items_per_block)
    cluster_size = items_per_block // subclusters
    item_cluster = np.concatenate(
        [b * subclusters + np.repeat(np.arange(subclusters), cluster_size) for b in (0, 1)]
    )

    base = _base_weights(subclusters)
    probs = density * subclusters * base
    if probs.max() > 1.0:
        raise ValueError(f"density {density} too high for {subclusters} subclusters")

    weights = np.zeros((user_count, 2 * subclusters))
    edges: list[Interaction] = []
    for u in range(user_count):
        b = user_block[u]
        perm = rng.permutation(subclusters)
        for rank, c in enumerate(perm):
            weights[u, b * subclusters + c] = base[rank]
            members = np.flatnonzero((item_block == b) & (item_cluster == b * subclusters + c))
            hits = members[rng.random(members.size) < probs[rank]]
            edges.extend(Interaction(u, int(i), None) for i in hits)
    return SyntheticBlocks(tuple(edges), user_block, item_block, item_cluster, weights)
