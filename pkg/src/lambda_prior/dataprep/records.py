"""Annotation records as produced by the upstream captioner/detector/segmenter.

Records are read from JSON-lines with field names exactly as the dataclass
attributes. See ``annotation_record.schema.json`` next to this module.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator

SCHEMA_PATH = Path(__file__).with_name("annotation_record.schema.json")


class MalformedRecord(ValueError):
    def __init__(self, image_id: str, problem: str):
        self.image_id = image_id
        self.problem = problem
        super().__init__(f"record {image_id!r}: {problem}")


@dataclass(frozen=True)
class Box:
    x0: float
    y0: float
    x1: float
    y1: float
    logit: float

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def aspect_ratio(self) -> float:
        """Short side over long side, in (0, 1]."""
        w, h = self.width, self.height
        return min(w, h) / max(w, h)


@dataclass(frozen=True)
class SubjectSpan:
    label: str
    start: int  # first token index
    end: int  # one past the last token index


@dataclass(frozen=True)
class AnnotationRecord:
    image_id: str
    width: int
    height: int
    caption_tokens: tuple[str, ...]
    subject_spans: tuple[SubjectSpan, ...]
    boxes: tuple[Box, ...]
    mask_area_px: tuple[float, ...]
    mask_bg_fraction: tuple[float, ...]
    identical_object_count: int = 1

    @property
    def n_subjects(self) -> int:
        return len(self.subject_spans)

    def validate(self) -> "AnnotationRecord":
        """Raise :class:`MalformedRecord` on any invariant breach; return self otherwise."""
        rid = self.image_id

        def bad(msg):
            raise MalformedRecord(rid, msg)

        if self.width <= 0 or self.height <= 0:
            bad(f"non-positive image size {self.width}x{self.height}")
        n = len(self.subject_spans)
        if not (len(self.boxes) == len(self.mask_area_px) == len(self.mask_bg_fraction) == n):
            bad(
                f"per-subject lists disagree: spans={n} boxes={len(self.boxes)} "
                f"mask_area_px={len(self.mask_area_px)} mask_bg_fraction={len(self.mask_bg_fraction)}"
            )
        for i, b in enumerate(self.boxes):
            if not all(math.isfinite(v) for v in (b.x0, b.y0, b.x1, b.y1, b.logit)):
                bad(f"box {i} has non-finite values")
            if not (0 <= b.x0 < b.x1 <= self.width and 0 <= b.y0 < b.y1 <= self.height):
                bad(f"box {i} ({b.x0}, {b.y0}, {b.x1}, {b.y1}) outside image")
        for i, (a, f) in enumerate(zip(self.mask_area_px, self.mask_bg_fraction)):
            if not (math.isfinite(a) and a >= 0):
                bad(f"mask_area_px[{i}]={a}")
            if not (math.isfinite(f) and 0 <= f <= 1):
                bad(f"mask_bg_fraction[{i}]={f}")
        ntok = len(self.caption_tokens)
        spans = sorted(self.subject_spans, key=lambda s: s.start)
        prev_end = 0
        for s in spans:
            if not (0 <= s.start < s.end <= ntok):
                bad(f"span {s} outside {ntok} tokens")
            if s.start < prev_end:
                bad(f"span {s} overlaps a previous span")
            prev_end = s.end
        if self.identical_object_count < 0:
            bad("negative identical_object_count")
        return self

    def restrict(self, keep: Iterable[int]) -> "AnnotationRecord":
        """Copy holding only the subjects at indices ``keep``."""
        keep = list(keep)
        return replace(
            self,
            subject_spans=tuple(self.subject_spans[i] for i in keep),
            boxes=tuple(self.boxes[i] for i in keep),
            mask_area_px=tuple(self.mask_area_px[i] for i in keep),
            mask_bg_fraction=tuple(self.mask_bg_fraction[i] for i in keep),
        )

    def to_json(self) -> dict:
        d = asdict(self)
        d["caption_tokens"] = list(self.caption_tokens)
        d["subject_spans"] = [[s.label, s.start, s.end] for s in self.subject_spans]
        d["boxes"] = [[b.x0, b.y0, b.x1, b.y1, b.logit] for b in self.boxes]
        d["mask_area_px"] = list(self.mask_area_px)
        d["mask_bg_fraction"] = list(self.mask_bg_fraction)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "AnnotationRecord":
        expected = {f for f in cls.__dataclass_fields__}
        rid = str(d.get("image_id", "?"))
        unknown = set(d) - expected
        if unknown:
            raise MalformedRecord(rid, f"unknown fields {sorted(unknown)}")
        missing = expected - set(d) - {"identical_object_count"}
        if missing:
            raise MalformedRecord(rid, f"missing fields {sorted(missing)}")
        try:
            rec = cls(
                image_id=str(d["image_id"]),
                width=int(d["width"]),
                height=int(d["height"]),
                caption_tokens=tuple(str(t) for t in d["caption_tokens"]),
                subject_spans=tuple(SubjectSpan(str(l), int(s), int(e)) for l, s, e in d["subject_spans"]),
                boxes=tuple(Box(*(float(v) for v in b)) for b in d["boxes"]),
                mask_area_px=tuple(float(v) for v in d["mask_area_px"]),
                mask_bg_fraction=tuple(float(v) for v in d["mask_bg_fraction"]),
                identical_object_count=int(d.get("identical_object_count", 1)),
            )
        except (TypeError, ValueError) as exc:
            raise MalformedRecord(rid, f"bad field value: {exc}") from exc
        return rec.validate()


def read_jsonl(path) -> Iterator[AnnotationRecord]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(f"line {lineno}", f"invalid JSON: {exc}") from exc
            yield AnnotationRecord.from_json(obj)


def write_jsonl(path, records: Iterable[AnnotationRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
