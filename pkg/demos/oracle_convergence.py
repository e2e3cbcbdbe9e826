"""Train the desk prior on the linear synthetic world and score it against the oracle.

    python demos/oracle_convergence.py [steps]

With the default 2000 steps this is the convergence run behind the acceptance suite
(about 2.5 minutes on one core). Fewer steps give a quicker, rougher picture.
"""

import dataclasses
import sys

import numpy as np

from lambda_prior.cli import RunConfig
from lambda_prior.prior import predict
from lambda_prior.synthworld import g_predictor, gen_samples, gen_world, oracle_eval, split_heldout, to_manifest
from lambda_prior.train import Dataset, run_training

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
cfg = RunConfig(seed=0).seeded()
cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, total_steps=steps))

world = gen_world(cfg.world)
samples = gen_samples(world, cfg.n_train + cfg.n_heldout)
train, held = split_heldout(samples, cfg.n_heldout, cfg.world.seed)
manifest, cache = to_manifest(world, train[: cfg.n_train], held)
print(f"{len(train)} training samples, {len(held)} held out, io_dim {cfg.world.io_dim}")

result = run_training(Dataset(manifest, cache, "train"), cfg.prior, cfg.train)
hist = np.array(result.history)
print(f"loss: first 10 steps {hist[:10, 4].mean():.4f}, last 100 steps {hist[-100:, 4].mean():.4f}")

targets = np.stack([s.target for s in train])
mean_pred = lambda ss: np.tile(targets.mean(axis=0), (len(ss), 1))
for name, predictor in (
    ("oracle map", g_predictor(world)),
    ("mean target", mean_pred),
    ("trained prior", lambda ss: predict(result.params, [s.sequence() for s in ss])),
):
    sc = oracle_eval(world, predictor, held)
    print(f"{name:>14}: mse_norm {sc.mse_norm:.4f}  retrieval_top1 {sc.retrieval_top1:.3f}")
