"""Interleaved conditioning sequences.

A caption's token embeddings with each bound subject span replaced by the
subject's vision embedding, followed by four auxiliary slots (edge first) and
one query slot.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

TEXT = "text"
SUBJECT = "subject"
AUX = "aux"
QUERY = "query"

AUX_KINDS = ("edge", "reserved1", "reserved2", "reserved3")
N_AUX = len(AUX_KINDS)


class SequenceError(ValueError):
    pass


@dataclass(frozen=True)
class InterleavedSequence:
    """Slot embeddings plus per-slot kinds.

    Rows of ``embeds`` for unfilled auxiliary slots and for the query slot are
    zero; the prior substitutes its learned embeddings there.
    """

    embeds: np.ndarray  # (n_slots, io_dim)
    kinds: tuple[str, ...]
    aux_filled: tuple[bool, ...]  # one flag per AUX_KINDS entry
    subject_slot_spans: tuple[tuple[int, int], ...] = ()

    def __len__(self) -> int:
        return len(self.kinds)

    @property
    def io_dim(self) -> int:
        return self.embeds.shape[1]

    def count(self, kind: str) -> int:
        return sum(k == kind for k in self.kinds)

    @property
    def aux_start(self) -> int:
        return len(self.kinds) - N_AUX - 1

    def without_edge(self) -> "InterleavedSequence":
        """Same sequence with the edge slot reverted to its learned null."""
        if not self.aux_filled[0]:
            return self
        e = self.embeds.copy()
        e[self.aux_start] = 0.0
        return InterleavedSequence(e, self.kinds, (False,) + self.aux_filled[1:], self.subject_slot_spans)


def build_interleaved(
    token_embeds: np.ndarray,
    bindings: Mapping[tuple[int, int], np.ndarray] | Sequence[tuple[int, int, np.ndarray]] = (),
    edge: np.ndarray | None = None,
    per_token: bool = False,
    dtype=np.float32,
) -> InterleavedSequence:
    """Assemble the slot sequence for one caption.

    ``bindings`` maps ``(start, end)`` token spans (end exclusive) to subject
    vision embeddings. Each span collapses to one subject slot at its start
    position unless ``per_token`` is set, in which case every token of the
    span becomes a copy of the subject embedding.
    """
    tok = np.asarray(token_embeds)
    if tok.ndim != 2:
        raise SequenceError(f"token embeddings must be (n, d), got {tok.shape}")
    n, d = tok.shape
    if isinstance(bindings, Mapping):
        items = [(s, e, v) for (s, e), v in bindings.items()]
    else:
        items = list(bindings)
    items.sort(key=lambda it: it[0])
    prev = 0
    for s, e, v in items:
        if not (0 <= s < e <= n):
            raise SequenceError(f"span ({s}, {e}) outside {n} tokens")
        if s < prev:
            raise SequenceError(f"span ({s}, {e}) overlaps a previous span")
        if np.shape(v) != (d,):
            raise SequenceError(f"subject embedding shape {np.shape(v)} != ({d},)")
        prev = e
    if edge is not None and np.shape(edge) != (d,):
        raise SequenceError(f"edge embedding shape {np.shape(edge)} != ({d},)")

    rows, kinds, spans = [], [], []
    cursor = 0
    for s, e, v in items:
        rows.extend(tok[cursor:s])
        kinds.extend([TEXT] * (s - cursor))
        reps = (e - s) if per_token else 1
        rows.extend([np.asarray(v)] * reps)
        kinds.extend([SUBJECT] * reps)
        spans.append((s, e))
        cursor = e
    rows.extend(tok[cursor:])
    kinds.extend([TEXT] * (n - cursor))

    zero = np.zeros(d)
    rows.append(np.asarray(edge) if edge is not None else zero)
    rows.extend([zero] * (N_AUX - 1))
    kinds.extend([AUX] * N_AUX)
    rows.append(zero)
    kinds.append(QUERY)
    embeds = np.asarray(np.stack(rows), dtype=dtype)
    return InterleavedSequence(embeds, tuple(kinds), (edge is not None,) + (False,) * (N_AUX - 1), tuple(spans))
