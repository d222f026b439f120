"""Dual-tree guided false-negative relabeling and hard negative sampling for
implicit collaborative filtering."""

from .data import (
    Interaction,
    InteractionDataset,
    NoiseSpec,
    PlantedFnSet,
    augment_with_positives,
    inject_false_negatives,
    k_core_filter,
    load_interactions,
    split,
)
from .spectral import SpectralEmbedding, jaccard_similarity, normalized_laplacian, spectral_embed
from .tree import DualCodes, IndexTree, build_kary_tree, lcp_similarity, path_codes

__all__ = [
    "Interaction",
    "InteractionDataset",
    "NoiseSpec",
    "PlantedFnSet",
    "augment_with_positives",
    "inject_false_negatives",
    "k_core_filter",
    "load_interactions",
    "split",
    "SpectralEmbedding",
    "jaccard_similarity",
    "normalized_laplacian",
    "spectral_embed",
    "DualCodes",
    "IndexTree",
    "build_kary_tree",
    "lcp_similarity",
    "path_codes",
]

__version__ = "0.1.0"
