"""Finite-difference verification of the prior's full training objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dataprep.interleave import build_interleaved
from ..objective import LossConfig, total_term
from ..tensorcore import GradCheckReport, Tape, finite_diff_check, float_mode
from .model import PriorConfig, collate, forward, init_params

TOY = PriorConfig(n_layers=2, n_heads=2, head_dim=4, io_dim=16, max_seq=11, seed=0)


@dataclass
class GradCheckProblem:
    config: PriorConfig
    batch: object
    targets: np.ndarray
    pooled: np.ndarray
    noise: np.ndarray | None
    loss: LossConfig


def toy_problem(config: PriorConfig = TOY, batch_size: int = 4, seed: int = 0,
                loss: LossConfig | None = None) -> GradCheckProblem:
    """Random batch of varied-length sequences that fills ``max_seq`` at its longest.

    Sample ``b`` gets an edge embedding when ``b`` is even, so both the
    data path and the learned-null path of the edge slot carry gradient.
    """
    rng = np.random.default_rng(seed)
    io = config.io_dim
    longest = config.max_seq - config.n_aux - 1 - int(config.noise_token)
    seqs = []
    for b in range(batch_size):
        n_tok = longest if b == 0 else int(rng.integers(2, longest + 1))
        tokens = rng.standard_normal((n_tok + 1, io))
        span = (1, 3) if n_tok >= 2 else (0, 1)
        subj = rng.standard_normal(io)
        edge = rng.standard_normal(io) if b % 2 == 0 else None
        seqs.append(build_interleaved(tokens, [(span[0], span[1], subj)], edge=edge, dtype=np.float64))
    with float_mode("float64"):
        batch = collate(seqs, config)
    targets = rng.standard_normal((batch_size, io))
    pooled = rng.standard_normal((batch_size, io))
    noise = rng.standard_normal((batch_size, io)) if config.noise_token else None
    return GradCheckProblem(config, batch, targets, pooled, noise, loss or LossConfig())


def objective_value(problem: GradCheckProblem, arrays: dict[str, np.ndarray]) -> float:
    tape = Tape()
    p = {k: tape.leaf(v, name=k, requires_grad=False) for k, v in arrays.items()}
    z = forward(tape, p, problem.config, problem.batch, noise=problem.noise)
    total, _, _ = total_term(tape, z, problem.targets, problem.pooled, problem.loss)
    return float(total.data)


def objective_grads(problem: GradCheckProblem, arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    tape = Tape()
    p = {k: tape.leaf(v, name=k) for k, v in arrays.items()}
    z = forward(tape, p, problem.config, problem.batch, noise=problem.noise)
    total, _, _ = total_term(tape, z, problem.targets, problem.pooled, problem.loss)
    return tape.backward(total)


def prior_gradcheck(problem: GradCheckProblem | None = None, step: float = 1e-4, floor: float = 1e-6,
                    param_seed: int | None = None) -> GradCheckReport:
    """Central-difference check of every parameter of the prior under the full objective, in float64."""
    problem = problem or toy_problem()
    with float_mode("float64"):
        params = init_params(problem.config, seed=param_seed)
        arrays = dict(params.items())
        analytic = objective_grads(problem, arrays)
        return finite_diff_check(lambda a: objective_value(problem, a), arrays, analytic, step=step, floor=floor)
