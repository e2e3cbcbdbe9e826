"""``lambda-prior``: one executable for the whole pipeline.

Subcommands: synth, prep, train, eval, ablate, interp, gradcheck, params.

Structured settings come from a YAML or JSON file (``--config``); scalar
flags override it. A single top-level seed drives every random stream: each
component receives ``derive_seed(seed, component_name)``.

Exit codes: 0 success, 2 configuration error, 3 IO or data-format error,
4 numeric fault (non-finite values, failed gradient check).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .dataprep import FilterRules, FormatError, MalformedRecord, filter_record, read_jsonl, read_manifest, write_cache, write_jsonl, write_manifest
from .evalkit.ablation import LOSS_EDGE_VARIANTS, MetricsReport, Variant, ablation_run, evaluate, prediction_grid, report_emit
from .evalkit.metrics import interp_smoothness
from .objective import LossConfig
from .prior import PriorConfig, load_checkpoint, param_count
from .prior.gradcheck import prior_gradcheck, toy_problem
from .synthworld import WorldSpec, gen_dataset, gen_world, write_world_sidecar
from .tensorcore import NumericFault, set_float_mode
from .train import Dataset, TrainConfig, TrainingAborted, run_training

log = logging.getLogger("lambda_prior")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
LOG_ENV = "LAMBDA_PRIOR_LOG"
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class ConfigError(ValueError):
    pass


def derive_seed(seed: int, name: str) -> int:
    """Component seed for ``name``: first word of ``SeedSequence([seed, crc32(name)])``."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


# Desk-scale prior: 4 layers, 4 heads of 16, io 64; max_seq fits the default 9-token templates.
DESK_PRIOR = PriorConfig(n_layers=4, n_heads=4, head_dim=16, io_dim=64, max_seq=14)
PRESETS = {
    "desk": DESK_PRIOR,
    "full": PriorConfig(),
    "toy": PriorConfig(n_layers=2, n_heads=2, head_dim=4, io_dim=16, max_seq=11),
}


@dataclass(frozen=True)
class EvalSettings:
    pool: int = 64
    grid_rows: int = 5
    grid_cols: int = 5


@dataclass(frozen=True)
class AblationSettings:
    seeds: tuple[int, ...] = (0, 1, 2)
    n_train: int = 4000
    n_heldout: int = 512
    variants: tuple[Variant, ...] = LOSS_EDGE_VARIANTS


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    n_train: int = 10000
    n_heldout: int = 1000
    world: WorldSpec = field(default_factory=WorldSpec)
    filter: FilterRules = field(default_factory=FilterRules)
    prior: PriorConfig = DESK_PRIOR
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(peak_lr=1e-3))
    eval: EvalSettings = field(default_factory=EvalSettings)
    ablation: AblationSettings = field(default_factory=AblationSettings)

    def seeded(self) -> "RunConfig":
        """Copy with every component seed derived from the top-level seed."""
        return dataclasses.replace(
            self,
            world=dataclasses.replace(self.world, seed=derive_seed(self.seed, "synthworld")),
            prior=dataclasses.replace(self.prior, seed=derive_seed(self.seed, "prior")),
            train=dataclasses.replace(self.train, seed=derive_seed(self.seed, "train"), loss=self.loss),
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["world"] = self.world.to_dict()
        d["ablation"]["variants"] = [
            {"name": v.name, "lambda": v.loss.lam, "tau": v.loss.tau, "edges": v.use_edges} for v in self.ablation.variants
        ]
        return d


def _section(cls, raw, name, **extra):
    if raw is None:
        return None
    if not isinstance(raw, dict):
        raise ConfigError(f"section '{name}' must be a mapping")
    if "seed" in raw:
        raise ConfigError(f"unknown key '{name}.seed' (seeds derive from the top-level 'seed')")
    known = {f.name for f in fields(cls)} - {"seed"}
    for k in raw:
        if k not in known and k not in extra:
            raise ConfigError(f"unknown key '{name}.{k}'")
    return raw


def _variant(raw: dict) -> Variant:
    unknown = set(raw) - {"name", "lambda", "tau", "edges"}
    if unknown:
        raise ConfigError(f"unknown key 'ablation.variants.{sorted(unknown)[0]}'")
    return Variant(raw["name"], LossConfig(lam=raw.get("lambda", 0.2), tau=raw.get("tau", 0.07)), bool(raw.get("edges", False)))


def parse_run_config(raw: dict | None) -> RunConfig:
    """Validate a config mapping; every unknown key is an error naming the key."""
    raw = dict(raw or {})
    top = {f.name for f in fields(RunConfig)}
    for k in raw:
        if k not in top:
            raise ConfigError(f"unknown key '{k}'")
    kw = {}
    try:
        for k in ("seed", "n_train", "n_heldout"):
            if k in raw:
                kw[k] = int(raw[k])
        if (w := _section(WorldSpec, raw.get("world"), "world")) is not None:
            kw["world"] = WorldSpec.from_dict(w)
        if (f := _section(FilterRules, raw.get("filter"), "filter")) is not None:
            kw["filter"] = FilterRules.from_dict(f)
        if (p := raw.get("prior")) is not None:
            if isinstance(p, str):
                if p not in PRESETS:
                    raise ConfigError(f"unknown prior preset '{p}'")
                kw["prior"] = PRESETS[p]
            else:
                _section(PriorConfig, p, "prior")
                kw["prior"] = dataclasses.replace(DESK_PRIOR, **p)
        if (lo := raw.get("loss")) is not None:
            if not isinstance(lo, dict):
                raise ConfigError("section 'loss' must be a mapping")
            for k in lo:
                if k not in ("lambda", "lam", "tau", "normalize_before_dot"):
                    raise ConfigError(f"unknown key 'loss.{k}'")
            kw["loss"] = LossConfig.from_dict(lo)
        if (t := _section(TrainConfig, raw.get("train"), "train")) is not None:
            if "loss" in t:
                raise ConfigError("unknown key 'train.loss' (use the top-level 'loss' section)")
            kw["train"] = dataclasses.replace(RunConfig().train, **t)
        if (e := _section(EvalSettings, raw.get("eval"), "eval")) is not None:
            kw["eval"] = EvalSettings(**e)
        if (a := _section(AblationSettings, raw.get("ablation"), "ablation")) is not None:
            a = dict(a)
            if "seeds" in a:
                a["seeds"] = tuple(int(s) for s in a["seeds"])
            if "variants" in a:
                a["variants"] = tuple(_variant(v) for v in a["variants"])
            kw["ablation"] = AblationSettings(**a)
        cfg = RunConfig(**kw)
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc).strip("'\"")) from exc
    if cfg.prior.io_dim != cfg.world.io_dim:
        raise ConfigError(f"prior.io_dim {cfg.prior.io_dim} != world.io_dim {cfg.world.io_dim}")
    need = cfg.world.template_len[1] + cfg.prior.n_aux + 1 + int(cfg.prior.noise_token)
    if cfg.prior.max_seq < need:
        raise ConfigError(f"prior.max_seq {cfg.prior.max_seq} < {need} slots needed by the longest template")
    return cfg


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return parse_run_config({})
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML/JSON ({exc})") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_run_config(raw)


def apply_flags(cfg: RunConfig, args) -> RunConfig:
    try:
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
        loss_kw = {k: v for k, v in (("lam", args.lam), ("tau", args.tau)) if v is not None}
        if loss_kw:
            cfg = dataclasses.replace(cfg, loss=dataclasses.replace(cfg.loss, **loss_kw))
        train_kw = {k: v for k, v in (("total_steps", args.steps), ("batch_size", args.batch)) if v is not None}
        if args.steps is not None and cfg.train.warmup_steps is not None and cfg.train.warmup_steps >= args.steps:
            train_kw["warmup_steps"] = None
        if args.float64:
            train_kw["float_mode"] = "float64"
        if train_kw:
            cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, **train_kw))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.seeded()


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# commands

def cmd_synth(cfg: RunConfig, args) -> int:
    out = _out(args)
    world = gen_world(cfg.world)
    manifest, cache = gen_dataset(world, cfg.n_train, cfg.n_heldout)
    write_manifest(out, manifest, cache)
    write_world_sidecar(out / "world.json", cfg.world)
    print(f"wrote {len(manifest.entries)} records ({cfg.n_train} train target, {cfg.n_heldout} held-out target) to {out}")
    return EXIT_OK


def cmd_prep(cfg: RunConfig, args) -> int:
    out = _out(args)
    accepted, rejected = [], []
    for rec in read_jsonl(args.records):
        res = filter_record(rec, cfg.filter)
        if res.accepted:
            accepted.append(rec.restrict(res.kept))
        else:
            rejected.append({"image_id": rec.image_id, "rule": res.rule})
    counts: dict[str, int] = {}
    for r in rejected:
        counts[r["rule"]] = counts.get(r["rule"], 0) + 1
    write_jsonl(out / "filtered.jsonl", accepted)
    _dump_json(out / "rejections.json", {"rejected": rejected, "counts": counts, "rules": dataclasses.asdict(cfg.filter)})
    print(f"accepted {len(accepted)}, rejected {len(rejected)}")
    return EXIT_OK


def _dataset(path, split, use_edges=True) -> Dataset:
    manifest, cache = read_manifest(path)
    return Dataset(manifest, cache, split, use_edges=use_edges)


def cmd_train(cfg: RunConfig, args) -> int:
    out = _out(args)
    data = _dataset(args.data, "train", cfg.train.use_edges)
    _dump_json(out / "run_config.json", cfg.to_dict())
    res = run_training(data, cfg.prior, cfg.train, out, resume_from=args.resume)
    final = res.checkpoints[-1] if res.checkpoints else None
    print(f"trained to step {res.state.step}; final checkpoint {final}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    out = _out(args)
    params, _ = load_checkpoint(args.checkpoint)
    data = _dataset(args.data, args.split, cfg.train.use_edges)
    scores = evaluate(params, data, cfg.eval.pool, (cfg.eval.grid_rows, cfg.eval.grid_cols))
    meta = {"checkpoint": str(args.checkpoint), "split": args.split, "n": len(data), "prior": params.config.to_dict()}
    report = MetricsReport("eval", cfg.seed, **scores, metadata=meta)
    csv_path, _ = report_emit([report], out / "metrics")
    print(", ".join(f"{k}={v:.4f}" for k, v in scores.items()))
    print(f"wrote {csv_path}")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, args) -> int:
    out = _out(args)
    world = gen_world(cfg.world)
    seeds = [derive_seed(s, "ablation") for s in cfg.ablation.seeds]
    reports = ablation_run(world, cfg.ablation.variants, cfg.train, cfg.prior, seeds,
                           cfg.ablation.n_train, cfg.ablation.n_heldout, cfg.eval.pool)
    csv_path, _ = report_emit(reports, out / "ablation")
    print(csv_path.read_text(encoding="utf-8"), end="")
    return EXIT_OK


def cmd_interp(cfg: RunConfig, args) -> int:
    out = _out(args)
    params, _ = load_checkpoint(args.checkpoint)
    data = _dataset(args.data, None, cfg.train.use_edges)
    pos = {rid: i for i, rid in enumerate(data.ids)}
    missing = [c for c in args.corners if c not in pos]
    if missing:
        raise ConfigError(f"corner record(s) not in dataset: {missing}")
    grid = prediction_grid(params, [data.sequences[pos[c]] for c in args.corners], args.rows, args.cols, args.method)
    cells = np.stack([c for row in grid.cells for c in row])
    write_cache(out / "interp.bin", cells)
    smooth = interp_smoothness(grid)
    _dump_json(out / "interp.json", {"corners": list(args.corners), "rows": args.rows, "cols": args.cols,
                                     "method": args.method, "interp_smoothness": smooth})
    print(f"interp_smoothness={smooth:.6g}; wrote {args.rows}x{args.cols} grid to {out / 'interp.bin'}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    problem = toy_problem(PRESETS["toy"] if args.preset is None else PRESETS[args.preset], loss=cfg.loss)
    report = prior_gradcheck(problem)
    ok = report.passed(args.tol)
    print(f"gradcheck {'PASS' if ok else 'FAIL'}: max_rel_err={report.max_rel_err:.3e} "
          f"(tol {args.tol:g}), worst parameter {report.worst}")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_params(cfg: RunConfig, args) -> int:
    pc = PRESETS[args.preset] if args.preset else cfg.prior
    print(param_count(pc))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "prep": cmd_prep,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "interp": cmd_interp,
    "gradcheck": cmd_gradcheck,
    "params": cmd_params,
}


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    common = argparse.ArgumentParser(add_help=False, formatter_class=fmt)
    common.add_argument("--config", metavar="PATH", default=None, help="YAML or JSON run configuration")
    common.add_argument("--seed", type=int, default=None, help="top-level seed (overrides the config)")
    common.add_argument("--out", metavar="DIR", default="out", help="output directory")
    common.add_argument("--float64", action="store_true", help="train and evaluate in 64-bit floats")
    common.add_argument("--lambda", dest="lam", type=float, default=None, help="contrastive weight")
    common.add_argument("--tau", type=float, default=None, help="contrastive temperature")
    common.add_argument("--steps", type=int, default=None, help="total training steps")
    common.add_argument("--batch", type=int, default=None, help="batch size")

    parser = argparse.ArgumentParser(prog="lambda-prior", description=__doc__.split("\n")[0], formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], formatter_class=fmt, help="generate a synthetic world and dataset")
    p = sub.add_parser("prep", parents=[common], formatter_class=fmt, help="filter annotation records")
    p.add_argument("records", help="JSON-lines file of annotation records")
    p = sub.add_parser("train", parents=[common], formatter_class=fmt, help="train the prior on a dataset")
    p.add_argument("--data", required=True, help="dataset directory written by synth")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p = sub.add_parser("eval", parents=[common], formatter_class=fmt, help="score a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="heldout", help="manifest split to score")
    sub.add_parser("ablate", parents=[common], formatter_class=fmt, help="run the loss/edge ablation table")
    p = sub.add_parser("interp", parents=[common], formatter_class=fmt, help="interpolation grid between four predictions")
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True, help="dataset directory holding the corner records")
    p.add_argument("--corners", nargs=4, required=True, metavar="ID", help="record ids: top-left top-right bottom-left bottom-right")
    p.add_argument("--rows", type=int, default=5, help="grid rows")
    p.add_argument("--cols", type=int, default=5, help="grid columns")
    p.add_argument("--method", choices=("slerp", "lerp"), default="slerp", help="interpolation method")
    p = sub.add_parser("gradcheck", parents=[common], formatter_class=fmt, help="finite-difference check of the full objective")
    p.add_argument("--preset", choices=sorted(PRESETS), default=None, help="prior shape; toy when omitted")
    p.add_argument("--tol", type=float, default=1e-5, help="max relative error to pass")
    p = sub.add_parser("params", parents=[common], formatter_class=fmt, help="print the parameter count")
    p.add_argument("--preset", choices=sorted(PRESETS), default=None, help="use a named prior shape instead of the config")
    return parser


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "error").lower()
    if level not in LOG_LEVELS:
        raise ConfigError(f"{LOG_ENV} must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        cfg = apply_flags(load_run_config(args.config), args)
        if args.float64:
            set_float_mode("float64")
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAborted, NumericFault) as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError, MalformedRecord) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    finally:
        set_float_mode("float32")


if __name__ == "__main__":
    sys.exit(main())
