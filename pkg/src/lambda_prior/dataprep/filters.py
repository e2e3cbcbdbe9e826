"""Dataset filter rules applied to precomputed annotation records.

Order: image resolution, box count, identical-object cap, then per-subject
checks (aspect ratio, detection logit, mask/box fraction, background
fraction), then the subject count: at most ``hi`` detected subjects and at
least ``lo`` survivors. Per-subject checks drop single subjects; the others
reject the whole record.

Every threshold keeps its boundary value: a ratio of exactly 0.08 or 0.7, a
logit of exactly 0.3, a mask fraction of exactly 0.40 and a background
fraction of exactly 0.10 all survive.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .records import AnnotationRecord

# Rule ids, in evaluation order.
MIN_RESOLUTION = "min_resolution"
BOX_COUNT_RANGE = "box_count_range"
MAX_IDENTICAL = "max_identical"
RATIO_RANGE = "ratio_range"
MIN_LOGIT = "min_logit"
MIN_MASK_BOX_FRACTION = "min_mask_box_fraction"
MAX_BG_FRACTION = "max_bg_fraction"
SUBJECTS_PER_IMAGE_RANGE = "subjects_per_image_range"

RULE_ORDER = (
    MIN_RESOLUTION,
    BOX_COUNT_RANGE,
    MAX_IDENTICAL,
    RATIO_RANGE,
    MIN_LOGIT,
    MIN_MASK_BOX_FRACTION,
    MAX_BG_FRACTION,
    SUBJECTS_PER_IMAGE_RANGE,
)


@dataclass(frozen=True)
class FilterRules:
    min_resolution: int = 1024
    box_count_range: tuple[int, int] = (1, 8)
    max_identical: int = 6
    ratio_range: tuple[float, float] = (0.08, 0.7)
    min_logit: float = 0.3
    min_mask_box_fraction: float = 0.40
    max_bg_fraction: float = 0.10
    subjects_per_image_range: tuple[int, int] = (1, 4)
    # Upstream detector thresholds; recorded for provenance, not applied here.
    upstream_box_threshold: float = 0.2
    upstream_text_threshold: float = 0.2

    @classmethod
    def from_dict(cls, d: dict) -> "FilterRules":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown filter rule(s): {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return replace(cls(), **kw)


@dataclass(frozen=True)
class FilterResult:
    accepted: bool
    kept: tuple[int, ...] = ()
    rule: str | None = None
    # Populated in verbose mode: every failed check as (rule id, subject index or -1).
    failures: tuple[tuple[str, int], ...] = field(default=())


def subject_failures(rec: AnnotationRecord, i: int, rules: FilterRules) -> list[str]:
    box = rec.boxes[i]
    failed = []
    lo, hi = rules.ratio_range
    if not (lo <= box.aspect_ratio <= hi):
        failed.append(RATIO_RANGE)
    if not (box.logit >= rules.min_logit):
        failed.append(MIN_LOGIT)
    if not (rec.mask_area_px[i] / box.area >= rules.min_mask_box_fraction):
        failed.append(MIN_MASK_BOX_FRACTION)
    if not (rec.mask_bg_fraction[i] <= rules.max_bg_fraction):
        failed.append(MAX_BG_FRACTION)
    return failed


def filter_record(rec: AnnotationRecord, rules: FilterRules | None = None, verbose: bool = False) -> FilterResult:
    """Decide whether ``rec`` enters the dataset and which subjects it keeps.

    A rejection names the first failed rule. With ``verbose`` the full list
    of failures is attached as well (evaluation continues past image-level
    failures in that mode).
    """
    rules = rules or FilterRules()
    rec.validate()
    failures: list[tuple[str, int]] = []

    if min(rec.width, rec.height) < rules.min_resolution:
        failures.append((MIN_RESOLUTION, -1))
    lo, hi = rules.box_count_range
    if not (lo <= len(rec.boxes) <= hi):
        failures.append((BOX_COUNT_RANGE, -1))
    if rec.identical_object_count > rules.max_identical:
        failures.append((MAX_IDENTICAL, -1))
    if failures and not verbose:
        return FilterResult(False, (), failures[0][0], ())

    kept = []
    first_subject_rule = None
    for i in range(rec.n_subjects):
        failed = subject_failures(rec, i, rules)
        if failed:
            first_subject_rule = first_subject_rule or failed[0]
            failures.extend((r, i) for r in failed)
        else:
            kept.append(i)

    lo, hi = rules.subjects_per_image_range
    image_level = [f for f in failures if f[1] == -1]
    if image_level:
        return FilterResult(False, (), image_level[0][0], tuple(failures) if verbose else ())
    # The upper cap counts detected subjects, the lower bound counts survivors,
    # so loosening a per-subject rule can never push a record over the cap.
    if rec.n_subjects > hi or len(kept) < lo:
        if rec.n_subjects <= hi and not kept and first_subject_rule:
            rule = first_subject_rule
        else:
            rule = SUBJECTS_PER_IMAGE_RANGE
        failures.append((SUBJECTS_PER_IMAGE_RANGE, -1))
        return FilterResult(False, (), rule, tuple(failures) if verbose else ())
    return FilterResult(True, tuple(kept), None, tuple(failures) if verbose else ())


def apply_filter(rec: AnnotationRecord, rules: FilterRules | None = None) -> AnnotationRecord | None:
    """The record restricted to its kept subjects, or ``None`` if rejected."""
    res = filter_record(rec, rules)
    return rec.restrict(res.kept) if res.accepted else None
