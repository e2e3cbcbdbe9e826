"""Synthetic embedding worlds with a known ground-truth image-embedding map.

A world fixes a token vocabulary, a set of subjects, caption templates with
subject holes and a map ``G`` from pooled inputs to the target image
embedding::

    z_x = G(mean caption token embedding, mean subject vision embedding, edge or 0)

The prior never sees the pooled quantities, only the interleaved sequence, so
it has to learn the pooling as well as the map.

Text and vision embeddings are unit vectors. A subject's label token embedding
is its latent direction ``u``; each photographed instance is
``normalize(normalize(u + noise) + gap * m)`` with a shared modality offset
``m``, which keeps vision slots distinguishable from text slots.

The pooled caption embedding used by the contrastive term is the text block
of ``G`` applied to the mean token embedding, normalized. Caption and image
embeddings thus share one space, as a jointly trained text/image encoder
would give, instead of sitting behind an unrelated rotation.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .dataprep.interleave import InterleavedSequence, build_interleaved
from .dataprep.manifest import DatasetManifest, ManifestBuilder
from .dataprep.records import AnnotationRecord, Box, SubjectSpan
from .evalkit.metrics import retrieval_top1

MAX_SUBJECT_COSINE = 0.9


def substream(seed: int, *names) -> np.random.Generator:
    """Independent generator for ``(seed, *names)``; names hash with CRC-32 so streams are stable across runs."""
    keys = [seed & 0xFFFFFFFF]
    for n in names:
        keys.append(zlib.crc32(n.encode()) if isinstance(n, str) else int(n) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(keys))


@dataclass(frozen=True)
class WorldSpec:
    io_dim: int = 64
    n_subjects: int = 48
    n_words: int = 96
    n_templates: int = 64
    template_len: tuple[int, int] = (4, 9)
    holes: tuple[int, int] = (1, 3)
    map_kind: str = "linear"
    confusability: int = 1
    edge_fraction: float = 0.0
    gains: tuple[float, float, float] = (2.0, 1.0, 1.0)  # text, subject, edge
    identity_blocks: tuple[str, ...] = ("subject",)
    modality_gap: float = 1.0
    instance_noise: float = 0.1
    hidden_dim: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.map_kind not in ("linear", "mlp1"):
            raise ValueError(f"map_kind must be 'linear' or 'mlp1', got {self.map_kind!r}")
        if self.confusability < 1:
            raise ValueError("confusability must be >= 1")
        if not 0.0 <= self.edge_fraction <= 1.0:
            raise ValueError("edge_fraction must lie in [0, 1]")
        if self.holes[0] < 1 or self.holes[1] > self.template_len[0]:
            raise ValueError("holes must fit inside the shortest template")
        if self.n_subjects < self.holes[1] + 1:
            raise ValueError("not enough subjects to fill templates")
        bad = set(self.identity_blocks) - {"text", "subject", "edge"}
        if bad:
            raise ValueError(f"unknown identity block(s) {sorted(bad)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown WorldSpec field(s): {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class SynthSample:
    index: int
    group: int
    template: int
    record: AnnotationRecord
    tokens: np.ndarray  # (n_tokens, io)
    subjects: np.ndarray  # (k, io)
    edge: np.ndarray | None
    target: np.ndarray
    pooled: np.ndarray
    subject_ids: tuple[int, ...] = ()

    def sequence(self, with_edge: bool = True, dtype=np.float32) -> InterleavedSequence:
        bindings = [(s.start, s.end, v) for s, v in zip(self.record.subject_spans, self.subjects)]
        edge = self.edge if with_edge else None
        return build_interleaved(self.tokens, bindings, edge=edge, dtype=dtype)


def _unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _orthogonal(rng, d):
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


class World:
    def __init__(self, spec: WorldSpec):
        self.spec = spec
        d = spec.io_dim
        rng = substream(spec.seed, "world")
        self.words = [f"w{i:03d}" for i in range(spec.n_words)]
        self.labels = [f"subj{i:03d}" for i in range(spec.n_subjects)]
        self.word_embeds = _unit_rows(rng, spec.n_words, d)
        self.subject_latents = self._distinct_latents(rng, spec.n_subjects, d)
        self.modality = _unit_rows(rng, 1, d)[0]
        self.templates = self._make_templates(rng)
        blocks = []
        for name in ("text", "subject", "edge"):
            blocks.append(np.eye(d) if name in spec.identity_blocks else _orthogonal(rng, d))
        self.blocks = tuple(blocks)
        self.w_in = self.w_out = self.b_out = None
        if spec.map_kind == "mlp1":
            h = spec.hidden_dim
            self.w_in = rng.standard_normal((h, 3 * d)) * math.sqrt(2.0 / d)
            self.w_out = rng.standard_normal((d, h)) / math.sqrt(h)
            self.b_out = rng.standard_normal(d) * 0.1

    @staticmethod
    def _distinct_latents(rng, n, d):
        out = []
        while len(out) < n:
            v = _unit_rows(rng, 1, d)[0]
            if all(abs(v @ u) < MAX_SUBJECT_COSINE for u in out):
                out.append(v)
        return np.stack(out)

    def _make_templates(self, rng):
        lo, hi = self.spec.template_len
        hlo, hhi = self.spec.holes
        out = []
        for _ in range(self.spec.n_templates):
            n = int(rng.integers(lo, hi + 1))
            k = int(rng.integers(hlo, hhi + 1))
            holes = set(rng.choice(n, size=k, replace=False).tolist())
            words = rng.integers(0, self.spec.n_words, size=n)
            out.append(tuple(None if i in holes else int(words[i]) for i in range(n)))
        return out

    # ground-truth map
    def pooled_inputs(self, tokens, subjects, edge):
        d = self.spec.io_dim
        t = np.asarray(tokens, dtype=np.float64).mean(axis=0)
        s = np.asarray(subjects, dtype=np.float64).mean(axis=0) if len(subjects) else np.zeros(d)
        e = np.zeros(d) if edge is None else np.asarray(edge, dtype=np.float64)
        return t, s, e

    def apply_map(self, t, s, e) -> np.ndarray:
        g_t, g_s, g_e = self.spec.gains
        bt, bs, be = self.blocks
        if self.spec.map_kind == "linear":
            return g_t * (bt @ t) + g_s * (bs @ s) + g_e * (be @ e)
        x = np.concatenate([g_t * (bt @ t), g_s * (bs @ s), g_e * (be @ e)])
        return self.w_out @ np.tanh(self.w_in @ x) + self.b_out

    def caption_embedding(self, t) -> np.ndarray:
        """Pooled caption embedding in the shared space: the text block applied to mean text, unit norm."""
        v = self.blocks[0] @ t
        return v / np.linalg.norm(v)

    def target(self, tokens, subjects, edge=None) -> np.ndarray:
        return self.apply_map(*self.pooled_inputs(tokens, subjects, edge))

    def vision_embedding(self, subject: int, rng) -> np.ndarray:
        d = self.spec.io_dim
        v = self.subject_latents[subject] + self.spec.instance_noise * rng.standard_normal(d) / math.sqrt(d)
        v = v / np.linalg.norm(v) + self.spec.modality_gap * self.modality
        return v / np.linalg.norm(v)

    def edge_embedding(self, rng) -> np.ndarray:
        d = self.spec.io_dim
        v = rng.standard_normal(d) / math.sqrt(d)
        v = v / np.linalg.norm(v) + self.spec.modality_gap * self.modality
        return v / np.linalg.norm(v)

    # sampling
    def group_plan(self, group: int) -> tuple[int, list[tuple[int, ...]]]:
        """Template id and the subject assignment of every member of ``group``."""
        c = self.spec.confusability
        rng = substream(self.spec.seed, "group", group)
        tid = int(rng.integers(len(self.templates)))
        n_holes = sum(t is None for t in self.templates[tid])
        base = rng.choice(self.spec.n_subjects, size=n_holes, replace=False).tolist()
        pool = [s for s in range(self.spec.n_subjects) if s not in base]
        swaps = rng.choice(pool, size=c - 1, replace=False).tolist() if c > 1 else []
        members = [tuple(base)]
        for j, new in enumerate(swaps):
            swap = list(base)
            swap[j % n_holes] = int(new)
            members.append(tuple(swap))
        return tid, members

    def sample(self, index: int) -> SynthSample:
        c = self.spec.confusability
        group, member = divmod(index, c)
        tid, members = self.group_plan(group)
        subj_ids = members[member]
        rng = substream(self.spec.seed, "sample", index)
        template = self.templates[tid]
        tokens, names, spans = [], [], []
        it = iter(subj_ids)
        for pos, w in enumerate(template):
            if w is None:
                s = next(it)
                tokens.append(self.subject_latents[s])
                names.append(self.labels[s])
                spans.append(SubjectSpan(self.labels[s], pos, pos + 1))
            else:
                tokens.append(self.word_embeds[w])
                names.append(self.words[w])
        tokens = np.stack(tokens)
        subjects = np.stack([self.vision_embedding(s, rng) for s in subj_ids])
        edge = self.edge_embedding(rng) if rng.random() < self.spec.edge_fraction else None
        record = self._record(f"synth-{self.spec.seed}-{index:07d}", names, spans, rng)
        t, s, e = self.pooled_inputs(tokens, subjects, edge)
        pooled = self.caption_embedding(t)
        return SynthSample(index, group, tid, record, tokens, subjects, edge, self.apply_map(t, s, e), pooled, subj_ids)

    @staticmethod
    def _record(image_id, names, spans, rng) -> AnnotationRecord:
        size = 1024
        boxes, areas, bgs = [], [], []
        for _ in spans:
            long_side = float(rng.uniform(300, 700))
            short = long_side * float(rng.uniform(0.2, 0.6))
            w, h = (long_side, short) if rng.random() < 0.5 else (short, long_side)
            x0 = float(rng.uniform(0, size - w))
            y0 = float(rng.uniform(0, size - h))
            boxes.append(Box(x0, y0, x0 + w, y0 + h, float(rng.uniform(0.35, 0.95))))
            areas.append(w * h * float(rng.uniform(0.5, 0.95)))
            bgs.append(float(rng.uniform(0.0, 0.08)))
        return AnnotationRecord(
            image_id, size, size, tuple(names), tuple(spans), tuple(boxes), tuple(areas), tuple(bgs), 1
        ).validate()


def gen_world(spec: WorldSpec) -> World:
    return World(spec)


def n_groups(n: int, confusability: int) -> int:
    return -(-n // confusability)


def gen_samples(world: World, n: int, start: int = 0) -> list[SynthSample]:
    if n < 1:
        raise ValueError("n must be >= 1")
    return [world.sample(i) for i in range(start, start + n)]


def split_heldout(samples: Sequence[SynthSample], n_heldout: int, seed: int) -> tuple[list, list]:
    """Seeded split by whole confusable groups; held-out gets at least ``n_heldout`` samples."""
    groups: dict[int, list[SynthSample]] = {}
    for s in samples:
        groups.setdefault(s.group, []).append(s)
    order = substream(seed, "split").permutation(sorted(groups))
    held, train = set(), []
    count = 0
    for g in order:
        if count >= n_heldout:
            break
        held.add(int(g))
        count += len(groups[g])
    heldout = [s for s in samples if s.group in held]
    train = [s for s in samples if s.group not in held]
    return train, heldout


def to_manifest(world: World, train: Sequence[SynthSample], heldout: Sequence[SynthSample] = ()) -> tuple[DatasetManifest, np.ndarray]:
    b = ManifestBuilder(world.spec.io_dim, provenance={"world": world.spec.to_dict()})
    for split, items in (("train", train), ("heldout", heldout)):
        for s in items:
            b.add(s.record, s.tokens, s.subjects, s.target, s.pooled, edge=s.edge, split=split)
    return b.build()


def gen_dataset(world: World, n: int, n_heldout: int = 0) -> tuple[DatasetManifest, np.ndarray]:
    """Manifest and cache for ``n`` training samples plus a held-out split."""
    samples = gen_samples(world, n + n_heldout)
    if n_heldout:
        train, held = split_heldout(samples, n_heldout, world.spec.seed)
    else:
        train, held = samples, []
    return to_manifest(world, train, held)


def write_world_sidecar(path, spec: WorldSpec) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(spec.to_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")


@dataclass
class OracleScores:
    mse_norm: float
    retrieval_top1: float
    n: int = 0
    ties: int = 0
    extra: dict = field(default_factory=dict)


def mse_norm(preds: np.ndarray, targets: np.ndarray) -> float:
    """Mean squared error over the variance of the targets around their mean."""
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    err = ((preds - targets) ** 2).sum(axis=1).mean()
    var = ((targets - targets.mean(axis=0)) ** 2).sum(axis=1).mean()
    return float(err / var)


def oracle_eval(
    world: World,
    predictor: Callable[[Sequence[SynthSample]], np.ndarray],
    heldout: Sequence[SynthSample],
    pool: int = 64,
) -> OracleScores:
    """Score ``predictor`` against ground-truth targets on ``heldout``."""
    if pool < 2:
        raise ValueError("retrieval pool must hold at least 2 candidates")
    targets = np.stack([s.target for s in heldout])
    preds = np.asarray(predictor(heldout), dtype=np.float64)
    top1, ties = retrieval_top1(preds, targets, pool)
    return OracleScores(mse_norm(preds, targets), top1, len(heldout), ties)


def g_predictor(world: World) -> Callable[[Sequence[SynthSample]], np.ndarray]:
    """The ground-truth map itself, recomputed from stored inputs."""
    return lambda samples: np.stack([world.target(s.tokens, s.subjects, s.edge) for s in samples])

