"""Slide-level embeddings from bags of patch embeddings.

Aggregators (pooling, Deep Sets, memory networks, focal attention, GMM and
VAE-gradient Fisher vectors), the median-of-minimums set distance, and a
k-NN retrieval harness with 5-fold cross-validation.
"""

from slideagg.dataset import (
    DatasetManifest,
    FoldPlan,
    PatchSet,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    load_manifest,
    make_folds,
)
from slideagg.embedding import SlideEmbedding
from slideagg.errors import SlideAggError

__version__ = "0.1.0"

__all__ = [
    "DatasetManifest",
    "FoldPlan",
    "PatchSet",
    "SlideAggError",
    "SlideEmbedding",
    "SyntheticSpec",
    "generate_synthetic",
    "load_dataset",
    "load_manifest",
    "make_folds",
]
