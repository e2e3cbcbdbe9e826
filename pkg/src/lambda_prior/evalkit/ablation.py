"""Ablation driver: train loss/conditioning variants on one world and score each.

Every (variant, seed) pair trains from the same data with the same seed; the
variant only changes the loss weights or whether the edge slot carries data.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..embedspace import InterpGrid, interp_grid, normalize
from ..objective import LossConfig
from ..prior import PriorConfig, PriorParams, predict
from ..synthworld import World, gen_samples, mse_norm, split_heldout, to_manifest
from ..train import Dataset, TrainConfig, TrainingAborted, run_training
from .metrics import composition_alignment, concept_alignment, interp_smoothness

log = logging.getLogger(__name__)

CSV_COLUMNS = ("variant", "seed", "concept_align", "comp_align", "mse_norm", "interp_smoothness")
METRICS = CSV_COLUMNS[2:]


@dataclass
class MetricsReport:
    variant: str
    seed: int
    concept_align: float
    comp_align: float
    mse_norm: float
    interp_smoothness: float
    metadata: dict = field(default_factory=dict)

    def row(self) -> list[str]:
        return [self.variant, str(self.seed), *(_fmt(getattr(self, k)) for k in METRICS)]


@dataclass(frozen=True)
class Variant:
    name: str
    loss: LossConfig
    use_edges: bool = True


LOSS_EDGE_VARIANTS = (
    Variant("projection", LossConfig(lam=0.0), use_edges=False),
    Variant("contrastive_0.5", LossConfig(lam=0.5), use_edges=False),
    Variant("contrastive_0.2", LossConfig(lam=0.2), use_edges=False),
    Variant("edge_0.2", LossConfig(lam=0.2), use_edges=True),
)


def _fmt(x: float) -> str:
    return repr(float(x)) if math.isfinite(x) else "nan"


def config_hash(*objs) -> str:
    blob = json.dumps([_plain(o) for o in objs], sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _plain(o):
    if dataclasses.is_dataclass(o):
        return {k: _plain(v) for k, v in dataclasses.asdict(o).items()}
    if isinstance(o, dict):
        return {k: _plain(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_plain(v) for v in o]
    return o


def prediction_grid(params: PriorParams, corners: Sequence, rows: int = 5, cols: int = 5, method: str = "slerp") -> InterpGrid:
    """Predict the four corner sequences (tl, tr, bl, br), then interpolate between the unit predictions."""
    if len(corners) != 4:
        raise ValueError("need exactly four corner sequences")
    preds = predict(params, list(corners))
    return interp_grid(*(normalize(p) for p in preds.astype(np.float64)), rows, cols, method=method)


def evaluate(params: PriorParams, data: Dataset, pool: int = 64, grid: tuple[int, int] = (5, 5)) -> dict:
    """All four metrics of ``params`` on ``data``."""
    preds = predict(params, data.sequences).astype(np.float64)
    corners = [data.sequences[i] for i in _corner_ids(len(data))]
    return {
        "concept_align": concept_alignment(preds, data.subjects),
        "comp_align": composition_alignment(preds, data.pooled, pool),
        "mse_norm": mse_norm(preds, data.targets),
        "interp_smoothness": interp_smoothness(prediction_grid(params, corners, *grid)),
    }


def _corner_ids(n: int) -> list[int]:
    # four samples spread over the split; repeats are fine for tiny splits
    return [0, n // 4, n // 2, (3 * n) // 4]


@dataclass
class AblationData:
    train: dict[bool, Dataset]
    heldout: dict[bool, Dataset]


def ablation_data(world: World, n_train: int, n_heldout: int) -> AblationData:
    samples = gen_samples(world, n_train + n_heldout)
    tr, he = split_heldout(samples, n_heldout, world.spec.seed)
    manifest, cache = to_manifest(world, tr, he)
    return AblationData(
        {e: Dataset(manifest, cache, "train", use_edges=e) for e in (False, True)},
        {e: Dataset(manifest, cache, "heldout", use_edges=e) for e in (False, True)},
    )


def ablation_run(
    world: World,
    variants: Sequence[Variant],
    train_cfg: TrainConfig,
    prior_cfg: PriorConfig,
    seeds: Sequence[int] = (0, 1, 2),
    n_train: int = 4000,
    n_heldout: int = 512,
    pool: int = 64,
    data: AblationData | None = None,
) -> list[MetricsReport]:
    """Train and score every variant for every seed; one report per (variant, seed).

    A variant whose training aborts yields a row of NaN metrics with the
    error recorded under ``metadata["error"]``.
    """
    if not variants:
        raise ValueError("ablation_run needs at least one variant")
    data = data or ablation_data(world, n_train, n_heldout)
    reports = []
    for seed in seeds:
        for v in variants:
            pc = dataclasses.replace(prior_cfg, seed=seed)
            tc = dataclasses.replace(train_cfg, seed=seed, loss=v.loss, use_edges=v.use_edges)
            meta = {
                "world": world.spec.to_dict(),
                "prior": pc.to_dict(),
                "train": _plain(tc),
                "config_hash": config_hash(world.spec, pc, tc),
                "n_train": len(data.train[v.use_edges]),
                "n_heldout": len(data.heldout[v.use_edges]),
            }
            try:
                result = run_training(data.train[v.use_edges], pc, tc)
                scores = evaluate(result.params, data.heldout[v.use_edges], pool)
            except (TrainingAborted, FloatingPointError) as exc:
                log.warning("variant %s seed %d failed: %s", v.name, seed, exc)
                meta["error"] = str(exc)
                scores = {k: math.nan for k in METRICS}
            log.info("variant %s seed %d: %s", v.name, seed, scores)
            reports.append(MetricsReport(v.name, seed, **scores, metadata=meta))
    return reports


def median_by_variant(reports: Sequence[MetricsReport], metric: str) -> dict[str, float]:
    out: dict[str, list[float]] = {}
    for r in reports:
        out.setdefault(r.variant, []).append(getattr(r, metric))
    return {k: float(np.median(v)) for k, v in out.items()}


def report_emit(reports: Sequence[MetricsReport], path) -> tuple[Path, Path]:
    """Write ``<path>.csv`` and a ``<path>.json`` mirror with full metadata.

    Non-finite metrics are written as the token ``nan`` in both files.
    """
    if not reports:
        raise ValueError("no reports to emit")
    base = Path(path)
    if base.suffix in (".csv", ".json"):
        base = base.with_suffix("")
    base.parent.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = base.with_suffix(".csv"), base.with_suffix(".json")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in reports:
            w.writerow(r.row())
    doc = [
        {"variant": r.variant, "seed": r.seed, **{k: _json_num(getattr(r, k)) for k in METRICS}, "metadata": r.metadata}
        for r in reports
    ]
    json_path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return csv_path, json_path


def _json_num(x: float):
    return float(x) if math.isfinite(x) else "nan"


def read_reports(path) -> list[MetricsReport]:
    """Parse the JSON mirror written by :func:`report_emit`."""
    doc = json.loads(Path(path).with_suffix(".json").read_text(encoding="utf-8"))
    return [
        MetricsReport(d["variant"], d["seed"], **{k: float(d[k]) for k in METRICS}, metadata=d["metadata"])
        for d in doc
    ]
