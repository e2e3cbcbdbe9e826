import csv
import math

import numpy as np
import pytest

from lambda_prior.objective import LossConfig
from lambda_prior.prior import PriorConfig, init_params, load_checkpoint
from lambda_prior.synthworld import WorldSpec, gen_dataset, gen_world
from lambda_prior.train import (
    LOG_HEADER,
    Adam,
    Dataset,
    TrainConfig,
    TrainingAborted,
    checkpoint_name,
    clip_grads,
    edge_drop_mask,
    lr_at,
    run_training,
    train_step,
)

SMALL = PriorConfig(n_layers=1, n_heads=2, head_dim=4, io_dim=16, max_seq=11, seed=0)


@pytest.fixture(scope="module")
def small_data():
    spec = WorldSpec(io_dim=16, n_subjects=8, n_words=16, n_templates=8, template_len=(4, 6), edge_fraction=0.5, seed=0)
    m, cache = gen_dataset(gen_world(spec), 48)
    return Dataset(m, cache, split=None)


def small_cfg(**kw):
    base = dict(batch_size=8, peak_lr=1e-3, total_steps=10, seed=3)
    base.update(kw)
    return TrainConfig(**base)


# schedule

def test_lr_examples():
    cfg = TrainConfig(peak_lr=1e-3, warmup_steps=100, total_steps=1000)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(100, cfg) == 1e-3
    assert abs(lr_at(1000, cfg) - 1e-4) <= 1e-12
    assert lr_at(50, cfg) == pytest.approx(5e-4)


def test_lr_continuous_at_warmup_and_monotone_decay():
    cfg = TrainConfig(peak_lr=2.0, warmup_steps=10, total_steps=200)
    assert abs(lr_at(10, cfg) - lr_at(10 - 1e-9, cfg)) < 1e-6
    decay = [lr_at(s, cfg) for s in range(10, 201)]
    assert all(a >= b for a, b in zip(decay, decay[1:]))
    assert min(decay) == pytest.approx(0.2)


def test_default_warmup_and_constant_schedule():
    assert TrainConfig(total_steps=2000).warmup == 100
    cfg = TrainConfig(peak_lr=0.5, schedule="constant")
    assert {lr_at(s, cfg) for s in (0, 7, 2000)} == {0.5}


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(warmup_steps=10, total_steps=10)
    with pytest.raises(ValueError):
        TrainConfig(edge_drop_p=1.5)
    with pytest.raises(KeyError):
        TrainConfig.from_dict({"peak_lrr": 1.0})
    assert TrainConfig.from_dict({"loss": {"lambda": 0.5}}).loss.lam == 0.5


# optimizer pieces

def test_adam_zero_gradient_leaves_params_unchanged():
    p = init_params(SMALL)
    before = {k: v.copy() for k, v in p.items()}
    opt = Adam(p)
    for t in (1, 2, 3):
        opt.step(p, {k: np.zeros_like(v) for k, v in p.items()}, 1e-2, t)
    assert all(np.array_equal(before[k], p[k]) for k in p)


def test_adam_first_step_is_signed_lr():
    p = init_params(SMALL)
    before = p["query"].copy()
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    grads["query"] = np.full_like(p["query"], -3.0)
    Adam(p).step(p, grads, 0.01, 1)
    np.testing.assert_allclose(p["query"] - before, 0.01, rtol=1e-4)


def test_clip_grads():
    g = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
    assert clip_grads(g, 1.0) == 5.0
    assert math.isclose(math.sqrt((g["a"] ** 2).sum() + (g["b"] ** 2).sum()), 1.0, rel_tol=1e-9)
    small = {"a": np.array([0.1])}
    clip_grads(small, 1.0)
    assert small["a"][0] == 0.1


# edge dropout

def test_edge_drop_rate():
    rate = np.mean([edge_drop_mask(0, s, 1000, 0.01).mean() for s in range(1, 101)])
    assert 0.008 <= rate <= 0.012


@pytest.mark.parametrize("p", [0.0, 1.0])
def test_edge_drop_extremes(small_data, p):
    params = init_params(SMALL)
    opt = Adam(params)
    cfg = small_cfg(edge_drop_p=p)
    seen = 0
    for step in range(1, 6):
        idx = small_data.batch_indices(step, 8, cfg.seed)
        info = train_step(params, opt, small_data, idx, step, cfg)
        seen += info.edge_present.sum()
        if p == 0.0:
            assert not info.edge_dropped.any()
        else:
            assert info.edge_dropped[info.edge_present].all()
    assert seen > 0


# batching

def test_batch_indices_cover_each_epoch_once(small_data):
    n = len(small_data)
    steps = n // 8
    ids = np.concatenate([small_data.batch_indices(s, 8, 1) for s in range(1, steps + 1)])
    assert sorted(ids.tolist()) == list(range(n))
    nxt = np.concatenate([small_data.batch_indices(s, 8, 1) for s in range(steps + 1, 2 * steps + 1)])
    assert sorted(nxt.tolist()) == list(range(n)) and not np.array_equal(ids, nxt)


# runs

def test_ten_step_loss_bit_identical(small_data):
    a = run_training(small_data, SMALL, small_cfg())
    b = run_training(small_data, SMALL, small_cfg())
    assert a.history[-1][4] == b.history[-1][4]
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_zero_steps_writes_initial_checkpoint_only(small_data, tmp_path):
    res = run_training(small_data, SMALL, small_cfg(total_steps=0), out_dir=tmp_path)
    assert [p.name for p in res.checkpoints] == [checkpoint_name(0)]
    rows = list(csv.reader(open(tmp_path / "train_log.csv")))
    assert rows == [list(LOG_HEADER)]
    params, state = load_checkpoint(res.checkpoints[0])
    assert state.step == 0
    assert all(np.array_equal(params[k], init_params(SMALL)[k]) for k in params)


def test_log_and_periodic_checkpoints(small_data, tmp_path):
    res = run_training(small_data, SMALL, small_cfg(checkpoint_every=4), out_dir=tmp_path)
    assert [p.name for p in res.checkpoints] == [checkpoint_name(s) for s in (4, 8, 10)]
    rows = list(csv.DictReader(open(tmp_path / "train_log.csv")))
    assert [int(r["step"]) for r in rows] == list(range(1, 11))
    for r in rows:
        assert float(r["total"]) == pytest.approx(float(r["projection"]) + float(r["contrastive"]))
        assert float(r["ms"]) >= 0


def test_resume_equals_uninterrupted(small_data, tmp_path):
    cfg = small_cfg(total_steps=12)
    full = run_training(small_data, SMALL, cfg, out_dir=tmp_path / "full")
    part = run_training(small_data, SMALL, cfg, out_dir=tmp_path / "part", stop_at=5)
    assert part.checkpoints[-1].name == checkpoint_name(5)
    resumed = run_training(small_data, SMALL, cfg, out_dir=tmp_path / "res", resume_from=part.checkpoints[-1])
    a = (tmp_path / "full" / checkpoint_name(12)).read_bytes()
    b = (tmp_path / "res" / checkpoint_name(12)).read_bytes()
    assert a == b
    assert resumed.history == full.history[5:]


def test_resume_rejects_other_config(small_data, tmp_path):
    res = run_training(small_data, SMALL, small_cfg(total_steps=2), out_dir=tmp_path)
    other = PriorConfig(n_layers=2, n_heads=2, head_dim=4, io_dim=16, max_seq=11)
    with pytest.raises(ValueError):
        run_training(small_data, other, small_cfg(total_steps=4), resume_from=res.checkpoints[-1])


def test_non_finite_loss_aborts_with_batch(small_data):
    params = init_params(SMALL)
    params["out_proj"][...] = 1e30  # overflows float32 in the forward pass
    cfg = small_cfg()
    idx = small_data.batch_indices(1, 8, cfg.seed)
    with pytest.raises(TrainingAborted) as err:
        train_step(params, Adam(params), small_data, idx, 1, cfg)
    assert err.value.step == 1 and err.value.sample_ids == idx.tolist()


def test_lambda_zero_run_logs_zero_contrastive(small_data):
    res = run_training(small_data, SMALL, small_cfg(loss=LossConfig(lam=0.0)))
    assert all(row[3] == 0.0 for row in res.history)


def test_loss_decreases_tenfold_on_linear_world(desk_run):
    h = np.array(desk_run.result.history)
    first, last = h[:10, 4].mean(), h[-100:, 4].mean()
    assert first / last >= 10.0, (first, last)
