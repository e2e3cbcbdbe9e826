import json

import numpy as np
import pytest
from factories import random_record, subject_record

from lambda_prior.dataprep import (
    AnnotationRecord,
    Box,
    DegenerateBox,
    FilterRules,
    MalformedRecord,
    SequenceError,
    SubjectSpan,
    apply_crop,
    apply_filter,
    build_interleaved,
    compute_crop,
    filter_record,
    read_jsonl,
    write_jsonl,
)
from lambda_prior.dataprep import filters as F
from lambda_prior.dataprep.interleave import AUX, QUERY, SUBJECT, TEXT
from lambda_prior.dataprep.records import SCHEMA_PATH


# filter_record

def test_default_rules_exact():
    r = FilterRules()
    assert (r.min_resolution, r.box_count_range, r.max_identical) == (1024, (1, 8), 6)
    assert (r.ratio_range, r.min_logit, r.min_mask_box_fraction, r.max_bg_fraction) == ((0.08, 0.7), 0.3, 0.40, 0.10)
    assert r.subjects_per_image_range == (1, 4)


def test_example_subject_kept():
    rec = subject_record(box_wh=(400.0, 200.0), logit=0.35, mask_fraction=0.5, bg=0.05, size=(1024, 1024))
    res = filter_record(rec)
    assert res.accepted and res.kept == (0,)


def test_only_subject_bad_ratio_rejects_with_ratio_rule():
    rec = subject_record(box_wh=(1000.0, 50.0))
    assert rec.boxes[0].aspect_ratio == pytest.approx(0.05)
    res = filter_record(rec)
    assert not res.accepted and res.rule == F.RATIO_RANGE


def test_bad_subject_dropped_others_kept():
    good = subject_record(n_subjects=2)
    bad_box = Box(0.0, 0.0, 1000.0, 50.0, 0.35)
    rec = AnnotationRecord(good.image_id, good.width, good.height, good.caption_tokens, good.subject_spans,
                           (good.boxes[0], bad_box), good.mask_area_px, good.mask_bg_fraction)
    res = filter_record(rec)
    assert res.accepted and res.kept == (0,)
    out = apply_filter(rec)
    assert out.n_subjects == 1 and out.subject_spans == (good.subject_spans[0],)


def test_five_subjects_rejected_by_count():
    res = filter_record(subject_record(n_subjects=5))
    assert not res.accepted and res.rule == F.SUBJECTS_PER_IMAGE_RANGE


def test_image_level_rules_in_order():
    assert filter_record(subject_record(size=(1023, 4000))).rule == F.MIN_RESOLUTION
    assert filter_record(subject_record(n_subjects=0)).rule == F.BOX_COUNT_RANGE
    assert filter_record(subject_record(identical=7)).rule == F.MAX_IDENTICAL
    # resolution precedes box count
    assert filter_record(subject_record(n_subjects=0, size=(100, 100))).rule == F.MIN_RESOLUTION


def test_each_per_subject_rule_id():
    assert filter_record(subject_record(logit=0.2)).rule == F.MIN_LOGIT
    assert filter_record(subject_record(mask_fraction=0.3)).rule == F.MIN_MASK_BOX_FRACTION
    assert filter_record(subject_record(bg=0.2)).rule == F.MAX_BG_FRACTION


def test_verbose_lists_every_failure():
    rec = subject_record(box_wh=(80.0, 40.0), logit=0.1, bg=0.5, size=(100, 100))
    res = filter_record(rec, verbose=True)
    rules = {r for r, _ in res.failures}
    assert {F.MIN_RESOLUTION, F.MIN_LOGIT, F.MAX_BG_FRACTION} <= rules
    assert res.rule == F.MIN_RESOLUTION


def test_malformed_record_is_error_not_rejection():
    rec = subject_record()
    broken = AnnotationRecord(rec.image_id, 100, 100, rec.caption_tokens, rec.subject_spans, rec.boxes,
                              rec.mask_area_px, rec.mask_bg_fraction)
    with pytest.raises(MalformedRecord):
        filter_record(broken)


def test_rules_override_and_unknown_key():
    r = FilterRules.from_dict({"min_logit": 0.5, "ratio_range": [0.1, 0.9]})
    assert r.min_logit == 0.5 and r.ratio_range == (0.1, 0.9)
    with pytest.raises(KeyError):
        FilterRules.from_dict({"min_logits": 0.5})


def test_filter_idempotent_on_random_records():
    rng = np.random.default_rng(0)
    for i in range(300):
        out = apply_filter(random_record(rng, f"r{i}"))
        if out is not None:
            again = filter_record(out)
            assert again.accepted and again.kept == tuple(range(out.n_subjects))


# records

def test_record_json_roundtrip(tmp_path):
    recs = [random_record(np.random.default_rng(s), f"id{s}") for s in range(5)]
    path = tmp_path / "r.jsonl"
    write_jsonl(path, recs)
    assert list(read_jsonl(path)) == recs


def test_record_json_rejects_unknown_and_missing_fields():
    d = subject_record().to_json()
    with pytest.raises(MalformedRecord):
        AnnotationRecord.from_json({**d, "extra": 1})
    d.pop("boxes")
    with pytest.raises(MalformedRecord):
        AnnotationRecord.from_json(d)


def test_record_invariants():
    with pytest.raises(MalformedRecord):
        AnnotationRecord("x", 10, 10, ("a", "b"), (SubjectSpan("s", 0, 2), SubjectSpan("t", 1, 2)),
                         (Box(0, 0, 1, 1, 0.5),) * 2, (1.0, 1.0), (0.0, 0.0)).validate()
    with pytest.raises(MalformedRecord):
        AnnotationRecord("x", 10, 10, ("a",), (SubjectSpan("s", 0, 1),), (Box(0, 0, 1, 1, float("nan")),),
                         (1.0,), (0.0,)).validate()


def test_schema_file_lists_record_fields():
    schema = json.loads(SCHEMA_PATH.read_text())
    assert set(schema["required"]) >= {"image_id", "width", "height", "caption_tokens", "subject_spans", "boxes",
                                       "mask_area_px", "mask_bg_fraction"}
    assert set(schema["properties"]) == set(AnnotationRecord.__dataclass_fields__)


# crop

def test_crop_square():
    c = compute_crop((0, 0, 400, 400))
    assert c.scale == 0.56 and c.resized == (224, 224) and c.offset == (0, 0)


def test_crop_wide_box_centered_with_bands():
    c = compute_crop((0, 0, 400, 200))
    assert c.resized == (224, 112) and c.offset == (0, 56)
    assert c.pad_bands == (0, 56, 0, 56)


def test_crop_identity():
    c = compute_crop((10, 20, 234, 244))
    assert c.scale == 1.0 and c.resized == (224, 224) and c.offset == (0, 0)


def test_crop_degenerate_box():
    with pytest.raises(DegenerateBox):
        compute_crop((5, 5, 5, 50))


def test_crop_properties_random():
    rng = np.random.default_rng(1)
    for _ in range(500):
        w, h = rng.uniform(1, 3000, size=2)
        c = compute_crop((0, 0, w, h))
        assert max(c.resized) == 224 and min(c.resized) >= 1
        rw, rh = c.resized
        # aspect ratio reproduced within one pixel of rounding
        assert abs(rw - w * c.scale) <= 0.5 + 1e-9 and abs(rh - h * c.scale) <= 0.5 + 1e-9


def test_apply_crop_pads_white():
    img = np.zeros((300, 500, 3))
    out = apply_crop(img, compute_crop((0, 0, 400, 200)))
    assert out.shape[:2] == (224, 224)
    assert np.all(out[:56] == 1.0) and np.all(out[-56:] == 1.0)
    assert np.all(out[56:168] == 0.0)


# build_interleaved

def tok(n, d=4):
    return np.arange(n * d, dtype=float).reshape(n, d) + 1.0


def test_interleave_single_span_slot_count():
    s = build_interleaved(tok(6), {(2, 3): np.full(4, -1.0)})
    assert len(s) == 11
    assert s.kinds == (TEXT, TEXT, SUBJECT, TEXT, TEXT, TEXT, AUX, AUX, AUX, AUX, QUERY)


def test_interleave_no_spans_no_edge():
    s = build_interleaved(tok(3))
    assert s.kinds == (TEXT,) * 3 + (AUX,) * 4 + (QUERY,)
    assert s.aux_filled == (False,) * 4
    assert np.all(s.embeds[3:] == 0)


def test_interleave_two_spans_preserve_order():
    t = tok(10)
    a, b = np.full(4, -1.0), np.full(4, -2.0)
    s = build_interleaved(t, [(6, 9, b), (1, 3, a)], edge=np.full(4, 7.0))
    assert s.kinds[:7] == (TEXT, SUBJECT, TEXT, TEXT, TEXT, SUBJECT, TEXT)
    want = np.stack([t[0], a, t[3], t[4], t[5], b, t[9]])
    np.testing.assert_array_equal(s.embeds[:7], want.astype(np.float32))
    assert s.aux_filled[0] and np.all(s.embeds[7] == 7.0)
    assert s.subject_slot_spans == ((1, 3), (6, 9))


def test_interleave_per_token_flag():
    s = build_interleaved(tok(5), {(1, 4): np.zeros(4)}, per_token=True)
    assert s.count(SUBJECT) == 3 and len(s) == 5 + 5


def test_interleave_errors():
    with pytest.raises(SequenceError):
        build_interleaved(tok(5), [(0, 3, np.zeros(4)), (2, 4, np.zeros(4))])
    with pytest.raises(SequenceError):
        build_interleaved(tok(5), {(0, 1): np.zeros(3)})
    with pytest.raises(SequenceError):
        build_interleaved(tok(5), edge=np.zeros(5))


def test_without_edge():
    s = build_interleaved(tok(2), edge=np.ones(4))
    n = s.without_edge()
    assert n.aux_filled == (False,) * 4 and np.all(n.embeds[s.aux_start] == 0)
