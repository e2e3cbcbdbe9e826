"""Deterministic training loop for the prior.

Batch order, edge-slot dropout and the optional noise token all draw from
generators keyed on ``(seed, purpose, step or epoch)``, so a run resumed from
a checkpoint at step k replays exactly what the uninterrupted run would have
done from k on.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataprep.interleave import InterleavedSequence, build_interleaved
from .dataprep.manifest import DatasetManifest, entry_arrays
from .objective import LossBreakdown, LossConfig, breakdown, total_term
from .prior import PriorConfig, PriorParams, TrainState, collate, forward, init_params, load_checkpoint, save_checkpoint
from .synthworld import substream
from .tensorcore import NumericFault, Tape, float_mode

log = logging.getLogger(__name__)

LOG_HEADER = ("step", "lr", "projection", "contrastive", "total", "ms")
BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, sample_ids: Sequence[int], cause: Exception):
        self.step = step
        self.sample_ids = list(sample_ids)
        super().__init__(f"non-finite value at step {step} (batch samples {self.sample_ids[:8]}...): {cause}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    peak_lr: float = 5e-5
    warmup_steps: int | None = None  # None -> 5% of total_steps
    total_steps: int = 2000
    edge_drop_p: float = 0.01
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    checkpoint_every: int = 0  # 0 -> final checkpoint only
    float_mode: str = "float32"
    clip_norm: float = 1.0
    schedule: str = "cosine"  # or "constant"
    min_lr_ratio: float = 0.1
    use_edges: bool = True

    def __post_init__(self):
        if not 0.0 <= self.edge_drop_p <= 1.0:
            raise ValueError("edge_drop_p must lie in [0, 1]")
        if self.batch_size < 1 or self.total_steps < 0:
            raise ValueError("batch_size must be >= 1 and total_steps >= 0")
        if self.total_steps and not self.warmup < self.total_steps:
            raise ValueError("warmup_steps must be < total_steps")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    @property
    def warmup(self) -> int:
        if self.warmup_steps is None:
            return int(0.05 * self.total_steps)
        return self.warmup_steps

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown TrainConfig field(s): {sorted(unknown)}")
        if isinstance(d.get("loss"), dict):
            d["loss"] = LossConfig.from_dict(d["loss"])
        return cls(**d)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``peak_lr``, then cosine decay to ``min_lr_ratio * peak_lr`` at ``total_steps``."""
    peak = cfg.peak_lr
    if cfg.schedule == "constant":
        return peak
    w, total = cfg.warmup, cfg.total_steps
    if step < w:
        return peak * step / w
    if total == w:
        return peak
    progress = min(1.0, (step - w) / (total - w))
    floor = cfg.min_lr_ratio * peak
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


class Adam:
    """Adam without weight decay; moments live in the parameter dtype."""

    def __init__(self, params: PriorParams, moments: dict[str, np.ndarray] | None = None):
        if moments is None:
            moments = {}
            for k, v in params.items():
                moments[f"m/{k}"] = np.zeros_like(v)
                moments[f"v/{k}"] = np.zeros_like(v)
        self.moments = {k: np.asarray(v, dtype=params[k[2:]].dtype).copy() for k, v in moments.items()}

    def step(self, params: PriorParams, grads: dict[str, np.ndarray], lr: float, t: int) -> None:
        b1, b2 = BETAS
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for name, p in params.items():
            g = grads[name].astype(p.dtype, copy=False)
            m = self.moments[f"m/{name}"]
            v = self.moments[f"v/{name}"]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        s = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * grads[k].dtype.type(s)
    return total


class Dataset:
    """Interleaved sequences and targets for one manifest split, ready for batching."""

    def __init__(self, manifest: DatasetManifest, cache: np.ndarray, split: str | None = "train", use_edges: bool = True):
        entries = manifest.entries if split is None else manifest.split(split)
        self.ids = [e.record.image_id for e in entries]
        self.sequences: list[InterleavedSequence] = []
        targets, pooled, self.subjects, self.has_edge = [], [], [], []
        for e in entries:
            arr = entry_arrays(e, cache)
            bindings = [(s.start, s.end, v) for s, v in zip(e.record.subject_spans, arr["subjects"])]
            edge = arr["edge"] if use_edges else None
            self.sequences.append(build_interleaved(arr["tokens"], bindings, edge=edge))
            targets.append(arr["target"])
            pooled.append(arr["pooled"])
            self.subjects.append(arr["subjects"])
            self.has_edge.append(edge is not None)
        self.targets = np.stack(targets) if targets else np.zeros((0, manifest.io_dim), np.float32)
        self.pooled = np.stack(pooled) if pooled else np.zeros((0, manifest.io_dim), np.float32)
        self.has_edge = np.array(self.has_edge, dtype=bool)

    def __len__(self) -> int:
        return len(self.sequences)

    def batch_indices(self, step: int, batch_size: int, seed: int) -> np.ndarray:
        """Sample indices for 1-based ``step`` under per-epoch seeded permutations."""
        n = len(self)
        pos = np.arange((step - 1) * batch_size, step * batch_size)
        out = np.empty(batch_size, dtype=np.int64)
        for epoch in np.unique(pos // n):
            perm = substream(seed, "epoch", int(epoch)).permutation(n)
            sel = pos // n == epoch
            out[sel] = perm[pos[sel] % n]
        return out


@dataclass
class StepInfo:
    loss: LossBreakdown
    lr: float
    grad_norm: float
    edge_dropped: np.ndarray
    edge_present: np.ndarray


def edge_drop_mask(seed: int, step: int, n: int, p: float) -> np.ndarray:
    """Per-sample Bernoulli(p) decisions for ``step``."""
    return substream(seed, "edge_drop", step).random(n) < p


def train_step(
    params: PriorParams,
    opt: Adam,
    data: Dataset,
    idx: np.ndarray,
    step: int,
    cfg: TrainConfig,
) -> StepInfo:
    """One optimizer update on samples ``idx``; mutates ``params`` and ``opt``."""
    pcfg = params.config
    seqs = [data.sequences[i] for i in idx]
    batch = collate(seqs, pcfg)
    present = data.has_edge[idx]
    drop = edge_drop_mask(cfg.seed, step, len(idx), cfg.edge_drop_p)
    if drop.any():
        batch = batch.drop_edges(drop & present)
    noise = None
    if pcfg.noise_token:
        noise = substream(cfg.seed, "noise", step).standard_normal((len(idx), pcfg.io_dim))
    tape = Tape()
    try:
        bound = params.bind(tape)
        z_hat = forward(tape, bound, pcfg, batch, noise=noise)
        total, proj, con = total_term(tape, z_hat, data.targets[idx], data.pooled[idx], cfg.loss)
        grads = tape.backward(total)
    except NumericFault as exc:
        raise TrainingAborted(step, [int(i) for i in idx], exc) from exc
    gnorm = clip_grads(grads, cfg.clip_norm)
    if not math.isfinite(gnorm):
        raise TrainingAborted(step, [int(i) for i in idx], FloatingPointError("non-finite gradient norm"))
    lr = lr_at(step, cfg)
    opt.step(params, grads, lr, step)
    return StepInfo(breakdown(proj, con, len(idx)), lr, gnorm, drop, present)


@dataclass
class TrainResult:
    params: PriorParams
    state: TrainState
    checkpoints: list[Path]
    log_path: Path | None
    history: list[tuple[int, float, float, float, float]]


def checkpoint_name(step: int) -> str:
    return f"ckpt_{step:07d}.bin"


def run_training(
    data: Dataset,
    prior_cfg: PriorConfig,
    cfg: TrainConfig,
    out_dir=None,
    resume_from=None,
    stop_at: int | None = None,
) -> TrainResult:
    """Train from scratch or resume, writing checkpoints and a CSV log to ``out_dir``.

    ``stop_at`` ends the run early at that step (schedule still spans
    ``total_steps``); used to produce resumable partial runs.
    """
    if len(data) == 0:
        raise ValueError("training split is empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    last = cfg.total_steps if stop_at is None else min(stop_at, cfg.total_steps)
    with float_mode(cfg.float_mode):
        if resume_from is not None:
            params, state = load_checkpoint(resume_from)
            if state is None:
                raise ValueError(f"{resume_from} has no optimizer state to resume from")
            if params.config != prior_cfg:
                raise ValueError("checkpoint config differs from the requested prior config")
            params = params.astype(np.dtype(cfg.float_mode))
            opt = Adam(params, state.moments)
            first = state.step + 1
        else:
            params = init_params(prior_cfg)
            opt = Adam(params)
            first = 1
        checkpoints: list[Path] = []
        history = []
        fh = writer = None
        if out is not None:
            fh = open(out / "train_log.csv", "w", newline="")
            writer = csv.writer(fh)
            writer.writerow(LOG_HEADER)
            fh.flush()
        try:
            if first == 1 and out is not None and last == 0:
                checkpoints.append(_save(out, params, opt, 0))
            for step in range(first, last + 1):
                t0 = time.perf_counter()
                idx = data.batch_indices(step, cfg.batch_size, cfg.seed)
                info = train_step(params, opt, data, idx, step, cfg)
                ms = (time.perf_counter() - t0) * 1e3
                row = (step, info.lr, info.loss.projection, info.loss.contrastive, info.loss.total)
                history.append(row)
                if writer is not None:
                    writer.writerow([*(repr(v) if isinstance(v, float) else v for v in row), f"{ms:.3f}"])
                    fh.flush()
                if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and step != last:
                    checkpoints.append(_save(out, params, opt, step))
                if step % 100 == 0:
                    log.info("step %d lr %.3g loss %.5f", step, info.lr, info.loss.total)
            final_step = max(first - 1, last)
            if out is not None and (last > 0 or first > 1):
                checkpoints.append(_save(out, params, opt, final_step))
        finally:
            if fh is not None:
                fh.close()
    return TrainResult(params, TrainState(max(first - 1, last), opt.moments), checkpoints,
                       out / "train_log.csv" if out else None, history)


def _save(out: Path, params: PriorParams, opt: Adam, step: int) -> Path:
    path = out / checkpoint_name(step)
    save_checkpoint(path, params, TrainState(step, opt.moments))
    return path


def train_in_memory(data: Dataset, prior_cfg: PriorConfig, cfg: TrainConfig) -> TrainResult:
    return run_training(data, prior_cfg, cfg, out_dir=None)


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
