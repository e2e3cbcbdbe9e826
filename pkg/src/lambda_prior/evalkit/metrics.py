"""Embedding-space alignment proxies.

``concept_alignment`` asks how much of the reference subject survives in a
prediction; ``composition_alignment`` asks whether a prediction picks out its
own caption from a pool of others.
"""

from __future__ import annotations

import logging
import math
from typing import Sequence

import numpy as np

from ..embedspace import cosine_matrix

log = logging.getLogger(__name__)


def pool_chunks(n: int, pool: int) -> list[np.ndarray]:
    """Split ``range(n)`` into consecutive retrieval pools of about ``pool`` items.

    ``n // pool`` chunks share the remainder, so every pool holds between
    ``pool`` and ``2 * pool - 1`` items; fewer than ``pool`` items form a
    single pool.
    """
    if n < 2:
        raise ValueError(f"retrieval needs at least 2 items, got {n}")
    return np.array_split(np.arange(n), max(1, n // pool))


def retrieval_top1(preds: np.ndarray, candidates: np.ndarray, pool: int = 64) -> tuple[float, int]:
    """Fraction of rows whose own candidate has the highest cosine within its pool.

    Candidate ``i`` belongs to prediction ``i``. Ties go to the lowest index
    in the pool. Returns ``(fraction, number of rows with a tie at the top)``.
    """
    if pool < 2:
        raise ValueError(f"pool size must be >= 2, got {pool}")
    preds = np.asarray(preds, dtype=np.float64)
    candidates = np.asarray(candidates, dtype=np.float64)
    if preds.shape != candidates.shape:
        raise ValueError(f"shape mismatch {preds.shape} vs {candidates.shape}")
    hits = ties = 0
    for idx in pool_chunks(len(preds), pool):
        sims = cosine_matrix(preds[idx], candidates[idx])
        best = sims.argmax(axis=1)
        top = sims.max(axis=1, keepdims=True)
        ties += int(((sims == top).sum(axis=1) > 1).sum())
        hits += int((best == np.arange(len(idx))).sum())
    if ties:
        log.info("retrieval: %d rows tied at the top, resolved to lowest index", ties)
    return hits / len(preds), ties


def concept_alignment(preds: np.ndarray, subject_embeds: Sequence[np.ndarray]) -> float:
    """Mean over samples of the best cosine between the prediction and any of its subjects."""
    if len(preds) == 0:
        raise ValueError("concept_alignment of an empty batch")
    if len(preds) != len(subject_embeds):
        raise ValueError("predictions and subject lists differ in length")
    vals = [cosine_matrix(np.asarray(p)[None], np.atleast_2d(s)).max() for p, s in zip(preds, subject_embeds)]
    return float(np.mean(vals))


def composition_alignment(preds: np.ndarray, caption_embeds: np.ndarray, pool: int = 64) -> float:
    if pool < 2:
        raise ValueError(f"pool size must be >= 2, got {pool}")
    return retrieval_top1(preds, caption_embeds, pool)[0]


def interp_smoothness(grid) -> float:
    """Largest ``1 - cos`` between adjacent cells of an interpolation grid."""
    gaps = grid.successive_gaps()
    return float(gaps.max()) if gaps.size else math.nan
