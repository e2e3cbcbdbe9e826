import json
from pathlib import Path

import numpy as np
import pytest

from lambda_prior.dataprep import FormatError, VersionMismatch, build_interleaved
from lambda_prior.prior import (
    PriorConfig,
    PriorInputError,
    TrainState,
    checkpoint_bytes,
    collate,
    forward,
    init_params,
    load_checkpoint,
    param_count,
    param_shapes,
    parse_checkpoint,
    predict,
    save_checkpoint,
)
from lambda_prior.prior.gradcheck import TOY, prior_gradcheck, toy_problem
from lambda_prior.tensorcore import Tape, float_mode

GOLDEN = Path(__file__).with_name("golden") / "toy_forward.json"


def toy_seq(seed=0, n_tok=6, d=16, edge=True, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return build_interleaved(rng.standard_normal((n_tok, d)), {(1, 2): rng.standard_normal(d)},
                             edge=rng.standard_normal(d) if edge else None, dtype=dtype)


def test_param_count_full_config():
    n = param_count(PriorConfig())
    assert n == 32_837_888
    assert 32_000_000 <= n <= 36_000_000


def test_param_count_matches_enumeration():
    for cfg in (TOY, PriorConfig(n_layers=0, io_dim=8, n_heads=2, head_dim=3, max_seq=9),
                PriorConfig(n_layers=3, n_heads=2, head_dim=5, io_dim=7, mlp_ratio=2, max_seq=12, noise_token=True)):
        shapes = param_shapes(cfg)
        assert param_count(cfg) == sum(int(np.prod(s)) for s in shapes.values())
        assert param_count(cfg) == init_params(cfg).count
    assert param_count(TOY) == 2040


def test_zero_layer_count_is_projections_embeddings_norms():
    cfg = PriorConfig(n_layers=0, n_heads=2, head_dim=4, io_dim=16, max_seq=11)
    d, io = 8, 16
    assert param_count(cfg) == 2 * io * d + 5 * io + 11 * d + 2 * d


def test_toy_shapes():
    p = init_params(TOY)
    assert p["in_proj"].shape == (16, 8) and p["out_proj"].shape == (8, 16)
    assert p["pos"].shape == (11, 8) and p["aux_null"].shape == (4, 16) and p["query"].shape == (1, 16)
    assert p["layers.01.mlp.w1"].shape == (8, 32) and p["layers.01.mlp.w2"].shape == (32, 8)
    assert p["layers.00.attn.wq"].shape == (8, 8)


def test_no_time_embedding_parameters():
    for name, shape in param_shapes(PriorConfig(noise_token=True)).items():
        assert "time" not in name and "step" not in name


def test_init_determinism():
    a, b = init_params(TOY), init_params(TOY)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    c = init_params(TOY, seed=1)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_forward_deterministic_and_attention_convex():
    p = init_params(TOY)
    seqs = [toy_seq(0), toy_seq(1, n_tok=3, edge=False)]
    log1, log2 = [], []
    t1, t2 = Tape(), Tape()
    y1 = forward(t1, p.bind(t1, False), TOY, collate(seqs, TOY), attn_log=log1).data
    y2 = forward(t2, p.bind(t2, False), TOY, collate(seqs, TOY), attn_log=log2).data
    assert np.array_equal(y1, y2)
    for a in log1:
        np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-6)


def test_padding_does_not_change_prediction():
    p = init_params(TOY)
    short, long_ = toy_seq(2, n_tok=2), toy_seq(3, n_tok=6)
    with float_mode("float64"):
        p64 = p.astype(np.float64)
        alone = predict(p64, [short])
        batched = predict(p64, [short, long_])
    np.testing.assert_allclose(batched[0], alone[0], atol=1e-12)


def test_zero_layer_output_ignores_text():
    cfg = PriorConfig(n_layers=0, n_heads=2, head_dim=4, io_dim=16, max_seq=11)
    p = init_params(cfg)
    a = predict(p, [toy_seq(0)])
    b = predict(p, [toy_seq(5)])
    np.testing.assert_array_equal(a, b)


def test_subject_slot_changes_output():
    p = init_params(TOY)
    s = toy_seq(0)
    e = s.embeds.copy()
    e[1] += 1.0
    s2 = type(s)(e, s.kinds, s.aux_filled, s.subject_slot_spans)
    assert np.linalg.norm(predict(p, [s]) - predict(p, [s2])) > 0


def test_dropped_edge_equals_absent_edge():
    p = init_params(TOY)
    s = toy_seq(0, edge=True)
    b = collate([s], TOY).drop_edges(np.array([True]))
    t = Tape()
    dropped = forward(t, p.bind(t, False), TOY, b).data
    np.testing.assert_array_equal(dropped, predict(p, [s.without_edge()]))


def test_input_errors():
    p = init_params(TOY)
    with pytest.raises(PriorInputError):
        predict(p, [toy_seq(0, n_tok=7)])  # 7 + 4 + 1 > 11
    with pytest.raises(PriorInputError):
        predict(p, [toy_seq(0, d=8)])
    cfg = PriorConfig(n_layers=1, n_heads=2, head_dim=4, io_dim=16, max_seq=12, noise_token=True)
    with pytest.raises(PriorInputError):
        predict(init_params(cfg), [toy_seq(0)])


def test_noise_token_path():
    cfg = PriorConfig(n_layers=1, n_heads=2, head_dim=4, io_dim=16, max_seq=12, noise_token=True)
    p = init_params(cfg)
    rng = np.random.default_rng(0)
    n1, n2 = rng.standard_normal((1, 16)), rng.standard_normal((1, 16))
    assert not np.array_equal(predict(p, [toy_seq(0)], noise=n1), predict(p, [toy_seq(0)], noise=n2))


def test_noise_token_gradcheck():
    cfg = PriorConfig(n_layers=1, n_heads=2, head_dim=2, io_dim=6, max_seq=10, noise_token=True)
    report = prior_gradcheck(toy_problem(cfg, batch_size=3))
    assert report.max_rel_err <= 1e-5, report


def golden_value():
    with float_mode("float64"):
        p = init_params(TOY)
        return predict(p, [toy_seq(0, n_tok=6, dtype=np.float64)])[0]


def test_golden_forward():
    want = np.array(json.loads(GOLDEN.read_text())["output"])
    np.testing.assert_allclose(golden_value(), want, rtol=0, atol=1e-12)


# checkpoint format

def test_checkpoint_roundtrip_byte_exact(tmp_path):
    p = init_params(TOY)
    moments = {f"{m}/{k}": np.full_like(v, 0.5) for k, v in p.items() for m in ("m", "v")}
    save_checkpoint(tmp_path / "c.bin", p, TrainState(7, moments))
    raw = (tmp_path / "c.bin").read_bytes()
    p2, st = load_checkpoint(tmp_path / "c.bin")
    assert st.step == 7 and p2.config == TOY
    assert all(np.array_equal(p[k], p2[k]) for k in p)
    assert checkpoint_bytes(p2, st) == raw
    assert raw.startswith(b"LPRIOR-CKPT\0")


def test_checkpoint_without_state():
    p = init_params(TOY)
    p2, st = parse_checkpoint(checkpoint_bytes(p))
    assert st is None and all(np.array_equal(p[k], p2[k]) for k in p)


def test_checkpoint_corruption(tmp_path):
    raw = checkpoint_bytes(init_params(TOY), TrainState(1, {}))
    bad = bytearray(raw)
    bad[0] ^= 0xFF
    with pytest.raises(VersionMismatch):
        parse_checkpoint(bytes(bad))
    with pytest.raises(FormatError):
        parse_checkpoint(raw[:-10])
    with pytest.raises(FormatError):
        parse_checkpoint(raw + b"x")
