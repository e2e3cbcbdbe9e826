"""Embedding-space alignment metrics and the ablation driver."""

from .metrics import (
    composition_alignment,
    concept_alignment,
    interp_smoothness,
    pool_chunks,
    retrieval_top1,
)
