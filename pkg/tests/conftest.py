"""Shared fixtures: the desk-scale oracle run is expensive, so each seed trains once per session."""

import functools
import time
from dataclasses import dataclass

import pytest

from lambda_prior.cli import RunConfig
from lambda_prior.prior import predict
from lambda_prior.synthworld import OracleScores, gen_samples, gen_world, oracle_eval, split_heldout, to_manifest
from lambda_prior.train import Dataset, TrainResult, run_training


@dataclass
class DeskRun:
    config: RunConfig
    result: TrainResult
    scores: OracleScores
    seconds: float


@functools.lru_cache(maxsize=None)
def desk_oracle_run(seed: int) -> DeskRun:
    """Default CLI settings: linear world, 10k/1k split, 4x4x16 prior, 2000 steps, batch 64."""
    cfg = RunConfig(seed=seed).seeded()
    t0 = time.perf_counter()
    world = gen_world(cfg.world)
    samples = gen_samples(world, cfg.n_train + cfg.n_heldout)
    train, held = split_heldout(samples, cfg.n_heldout, cfg.world.seed)
    manifest, cache = to_manifest(world, train[: cfg.n_train], held)
    result = run_training(Dataset(manifest, cache, "train"), cfg.prior, cfg.train)
    scores = oracle_eval(world, lambda ss: predict(result.params, [s.sequence() for s in ss]), held)
    return DeskRun(cfg, result, scores, time.perf_counter() - t0)


_VERDICTS: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record the one-line verdict of an acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])


@pytest.fixture(scope="session")
def desk_run() -> DeskRun:
    return desk_oracle_run(0)
