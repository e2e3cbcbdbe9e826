"""Dataset construction on precomputed annotation records."""

from .crop import CANVAS, CropSpec, DegenerateBox, apply_crop, compute_crop
from .filters import FilterResult, FilterRules, RULE_ORDER, apply_filter, filter_record
from .interleave import AUX_KINDS, N_AUX, InterleavedSequence, SequenceError, build_interleaved
from .manifest import (
    DatasetManifest,
    FormatError,
    ManifestBuilder,
    ManifestEntry,
    VersionMismatch,
    entry_arrays,
    manifest_stats,
    read_cache,
    read_manifest,
    write_cache,
    write_manifest,
)
from .records import AnnotationRecord, Box, MalformedRecord, SubjectSpan, read_jsonl, write_jsonl

__all__ = [
    "AUX_KINDS",
    "AnnotationRecord",
    "Box",
    "CANVAS",
    "CropSpec",
    "DatasetManifest",
    "DegenerateBox",
    "FilterResult",
    "FilterRules",
    "FormatError",
    "InterleavedSequence",
    "MalformedRecord",
    "ManifestBuilder",
    "ManifestEntry",
    "N_AUX",
    "RULE_ORDER",
    "SequenceError",
    "SubjectSpan",
    "VersionMismatch",
    "apply_crop",
    "apply_filter",
    "build_interleaved",
    "compute_crop",
    "entry_arrays",
    "filter_record",
    "manifest_stats",
    "read_cache",
    "read_jsonl",
    "read_manifest",
    "write_cache",
    "write_jsonl",
    "write_manifest",
]
