import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lambda_prior.evalkit import composition_alignment, concept_alignment, interp_smoothness, retrieval_top1
from lambda_prior.evalkit.ablation import (
    CSV_COLUMNS,
    MetricsReport,
    Variant,
    ablation_data,
    ablation_run,
    evaluate,
    median_by_variant,
    prediction_grid,
    read_reports,
    report_emit,
)
from lambda_prior.embedspace import interp_grid
from lambda_prior.objective import LossConfig
from lambda_prior.prior import PriorConfig, init_params
from lambda_prior.synthworld import WorldSpec, gen_world
from lambda_prior.train import TrainConfig

TINY_PRIOR = PriorConfig(n_layers=1, n_heads=2, head_dim=4, io_dim=16, max_seq=11)
TINY_WORLD = WorldSpec(io_dim=16, n_subjects=8, n_words=16, n_templates=8, template_len=(4, 6), edge_fraction=0.5)


def unit_rows(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def random_rotation(rng, d):
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return q


# concept alignment

def test_concept_identity_and_orthogonal():
    rng = np.random.default_rng(0)
    subj = unit_rows(rng, 5, 8)
    assert concept_alignment(subj, [s[None] for s in subj]) == pytest.approx(1.0, abs=1e-12)
    e = np.eye(8)
    assert concept_alignment(e[:2], [e[2:4], e[4:6]]) == 0.0


def test_concept_hand_loop():
    rng = np.random.default_rng(1)
    preds = rng.standard_normal((3, 6))
    subjects = [rng.standard_normal((k, 6)) for k in (1, 2, 3)]
    want = 0.0
    for p, subs in zip(preds, subjects):
        best = -2.0
        for s in subs:
            best = max(best, float(p @ s) / (math.sqrt(p @ p) * math.sqrt(s @ s)))
        want += best / 3
    assert concept_alignment(preds, subjects) == pytest.approx(want, abs=1e-12)


def test_concept_errors():
    with pytest.raises(ValueError):
        concept_alignment(np.zeros((0, 3)), [])
    with pytest.raises(ValueError):
        concept_alignment(np.ones((2, 3)), [np.ones((1, 3))])


# composition alignment

def test_self_retrieval_and_chance():
    rng = np.random.default_rng(2)
    caps = unit_rows(rng, 10_000, 32)
    assert composition_alignment(caps, caps) == 1.0
    shuffled = caps[rng.permutation(len(caps))]
    assert abs(composition_alignment(shuffled, caps) - 1 / 64) <= 0.02


def test_duplicate_captions_tie_to_lowest_index():
    caps = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    frac, ties = retrieval_top1(caps, caps, pool=3)
    # row 1 ties with row 0 and loses; rows 0 and 2 hit
    assert frac == pytest.approx(2 / 3) and ties == 2


def test_pool_of_one_rejected():
    with pytest.raises(ValueError):
        composition_alignment(np.eye(3), np.eye(3), pool=1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_metrics_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    preds, caps = rng.standard_normal((40, 8)), rng.standard_normal((40, 8))
    subjects = [rng.standard_normal((int(k), 8)) for k in rng.integers(1, 4, size=40)]
    q = random_rotation(rng, 8)
    assert concept_alignment(preds @ q, [s @ q for s in subjects]) == pytest.approx(concept_alignment(preds, subjects), abs=1e-12)
    assert composition_alignment(preds @ q, caps @ q, pool=8) == composition_alignment(preds, caps, pool=8)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_composition_invariant_to_pool_order(seed):
    rng = np.random.default_rng(seed)
    preds, caps = rng.standard_normal((16, 5)), rng.standard_normal((16, 5))
    perm = rng.permutation(16)
    assert composition_alignment(preds[perm], caps[perm], pool=16) == composition_alignment(preds, caps, pool=16)


def test_interp_smoothness_constant_grid_is_zero():
    v = np.ones(4) / 2
    assert abs(interp_smoothness(interp_grid(v, v, v, v, 4, 4))) <= 1e-12
    e = np.eye(4)
    assert interp_smoothness(interp_grid(e[0], e[1], e[2], e[3], 5, 5)) > 0


def test_prediction_grid_identical_corners_constant():
    p = init_params(TINY_PRIOR)
    data = ablation_data(gen_world(TINY_WORLD), 32, 8).train[True]
    g = prediction_grid(p, [data.sequences[0]] * 4, 3, 3)
    cells = g.cells.reshape(-1, g.cells.shape[-1])
    np.testing.assert_allclose(cells, np.broadcast_to(cells[0], cells.shape), atol=1e-12)


# reports

def report(variant="v", seed=0, **kw):
    vals = dict(concept_align=0.5, comp_align=0.25, mse_norm=0.125, interp_smoothness=0.01)
    vals.update(kw)
    return MetricsReport(variant, seed, **vals, metadata={"config_hash": "abc", "seed": seed})


def test_one_report_two_line_csv(tmp_path):
    csv_path, json_path = report_emit([report()], tmp_path / "r")
    lines = csv_path.read_text().splitlines()
    assert lines == [",".join(CSV_COLUMNS), "v,0,0.5,0.25,0.125,0.01"]
    assert json_path.exists()


def test_json_roundtrip_with_nan(tmp_path):
    reps = [report(), report("w", 1, mse_norm=float("nan"))]
    report_emit(reps, tmp_path / "r.csv")
    back = read_reports(tmp_path / "r")
    assert back[0] == reps[0]
    assert math.isnan(back[1].mse_norm) and back[1].metadata == reps[1].metadata
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert rows[1]["mse_norm"] == "nan"
    assert '"mse_norm": "nan"' in (tmp_path / "r.json").read_text()


def test_emit_empty_rejected(tmp_path):
    with pytest.raises(ValueError):
        report_emit([], tmp_path / "r")


def test_median_by_variant():
    reps = [report("a", s, comp_align=x) for s, x in enumerate((0.1, 0.9, 0.3))] + [report("b", 0, comp_align=0.7)]
    assert median_by_variant(reps, "comp_align") == {"a": 0.3, "b": 0.7}


# ablation driver

@pytest.fixture(scope="module")
def tiny_ablation():
    world = gen_world(TINY_WORLD)
    return world, ablation_data(world, 64, 16)


def tiny_train():
    return TrainConfig(batch_size=8, peak_lr=1e-3, total_steps=6)


def test_single_variant_single_seed_one_row(tiny_ablation):
    world, data = tiny_ablation
    rows = ablation_run(world, [Variant("only", LossConfig())], tiny_train(), TINY_PRIOR, seeds=(0,), data=data)
    assert len(rows) == 1 and rows[0].variant == "only"
    r = rows[0]
    assert -1 <= r.concept_align <= 1 and 0 <= r.comp_align <= 1 and math.isfinite(r.mse_norm)
    assert r.metadata["config_hash"] and r.metadata["n_heldout"] == len(data.heldout[True])


def test_identical_variants_identical_rows(tiny_ablation):
    world, data = tiny_ablation
    v = Variant("x", LossConfig(lam=0.2), use_edges=True)
    a, b = ablation_run(world, [v, v], tiny_train(), TINY_PRIOR, seeds=(3,), data=data)
    assert [getattr(a, k) for k in CSV_COLUMNS[2:]] == [getattr(b, k) for k in CSV_COLUMNS[2:]]


def test_failed_variant_gives_nan_row(tiny_ablation):
    world, data = tiny_ablation
    # a huge learning rate blows the float32 weights up within a few steps
    cfg = TrainConfig(batch_size=8, peak_lr=1e30, total_steps=6, warmup_steps=0, clip_norm=0.0)
    rows = ablation_run(world, [Variant("boom", LossConfig())], cfg, TINY_PRIOR, seeds=(0,), data=data)
    assert math.isnan(rows[0].mse_norm) and "error" in rows[0].metadata


def test_evaluate_keys(tiny_ablation):
    _, data = tiny_ablation
    out = evaluate(init_params(TINY_PRIOR), data.heldout[False], pool=8)
    assert set(out) == set(CSV_COLUMNS[2:])
    assert math.isfinite(out["interp_smoothness"])
