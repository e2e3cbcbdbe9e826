"""Dataset manifest plus binary embedding cache.

On disk a dataset is three files in one directory:

``manifest.json``
    header and accepted records; every record points at rows of the cache.
``embeddings.bin``
    16 bytes of magic + version, then little-endian uint32 ``count`` and
    ``dim``, then ``count * dim`` little-endian float32 values.
``embeddings.idx.json``
    record id -> ``[first_row, n_rows]``.

Readers validate everything before returning, so a bad file never yields a
partially loaded dataset.
"""

from __future__ import annotations

import json
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .records import AnnotationRecord, MalformedRecord

CACHE_MAGIC = b"LPRIOR-EMBC"  # 11 bytes, zero-padded to 12
CACHE_VERSION = 1
MANIFEST_FORMAT = "lambda-prior-manifest"
MANIFEST_VERSION = 1

MANIFEST_NAME = "manifest.json"
CACHE_NAME = "embeddings.bin"
INDEX_NAME = "embeddings.idx.json"

_HEADER = struct.Struct("<12sIII")  # magic, version, count, dim


class FormatError(ValueError):
    """Bad magic, unsupported version, truncation or a dangling reference."""


class VersionMismatch(FormatError):
    pass


@dataclass
class ManifestEntry:
    record: AnnotationRecord
    # Absolute cache rows: "tokens"/"subjects" -> [offset, count];
    # "edge" -> offset or None; "target"/"pooled" -> offset.
    refs: dict
    split: str = "train"

    @property
    def row_span(self) -> tuple[int, int]:
        rows = [self.refs["tokens"][0], self.refs["subjects"][0], self.refs["target"], self.refs["pooled"]]
        ends = [
            self.refs["tokens"][0] + self.refs["tokens"][1],
            self.refs["subjects"][0] + self.refs["subjects"][1],
            self.refs["target"] + 1,
            self.refs["pooled"] + 1,
        ]
        if self.refs.get("edge") is not None:
            rows.append(self.refs["edge"])
            ends.append(self.refs["edge"] + 1)
        return min(rows), max(ends) - min(rows)


@dataclass
class DatasetManifest:
    io_dim: int
    entries: list[ManifestEntry] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    @property
    def header(self) -> dict:
        splits = Counter(e.split for e in self.entries)
        return {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "io_dim": self.io_dim,
            "counts": {"records": len(self.entries), **{k: splits[k] for k in sorted(splits)}},
            "provenance": self.provenance,
        }

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]


class ManifestBuilder:
    """Accumulates records and their embedding rows into one contiguous cache."""

    def __init__(self, io_dim: int, provenance: dict | None = None):
        self.io_dim = io_dim
        self.provenance = dict(provenance or {})
        self._rows: list[np.ndarray] = []
        self._n = 0
        self.entries: list[ManifestEntry] = []

    def _append(self, block: np.ndarray) -> int:
        block = np.asarray(block, dtype=np.float32).reshape(-1, self.io_dim)
        off = self._n
        self._rows.append(block)
        self._n += block.shape[0]
        return off

    def add(self, record, tokens, subjects, target, pooled, edge=None, split="train") -> ManifestEntry:
        refs = {
            "tokens": [self._append(tokens), int(np.shape(tokens)[0])],
            "subjects": [self._append(subjects), int(np.shape(subjects)[0])],
            "edge": None if edge is None else self._append(edge),
            "target": self._append(target),
            "pooled": self._append(pooled),
        }
        entry = ManifestEntry(record, refs, split)
        self.entries.append(entry)
        return entry

    def build(self) -> tuple[DatasetManifest, np.ndarray]:
        cache = np.concatenate(self._rows) if self._rows else np.zeros((0, self.io_dim), np.float32)
        return DatasetManifest(self.io_dim, list(self.entries), self.provenance), cache


def write_cache(path, cache: np.ndarray) -> None:
    cache = np.ascontiguousarray(cache, dtype="<f4")
    count, dim = cache.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, count, dim))
        fh.write(cache.tobytes())


def read_cache(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, count, dim = _HEADER.unpack_from(raw)
    if magic.rstrip(b"\0") != CACHE_MAGIC:
        raise VersionMismatch(f"{path}: bad magic {magic!r}")
    if version != CACHE_VERSION:
        raise VersionMismatch(f"{path}: cache version {version}, expected {CACHE_VERSION}")
    need = _HEADER.size + 4 * count * dim
    if len(raw) != need:
        raise FormatError(f"{path}: expected {need} bytes for {count}x{dim}, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(count, dim).astype(np.float32)


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def write_manifest(directory, manifest: DatasetManifest, cache: np.ndarray) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    if cache.shape[1:] != (manifest.io_dim,):
        raise FormatError(f"cache dim {cache.shape} does not match io_dim {manifest.io_dim}")
    doc = {
        "header": {**manifest.header, "cache": CACHE_NAME, "index": INDEX_NAME},
        "records": [{"record": e.record.to_json(), "refs": e.refs, "split": e.split} for e in manifest.entries],
    }
    index = {e.record.image_id: list(e.row_span) for e in manifest.entries}
    write_cache(d / CACHE_NAME, cache)
    (d / INDEX_NAME).write_text(_dumps(index), encoding="utf-8")
    (d / MANIFEST_NAME).write_text(_dumps(doc), encoding="utf-8")
    return d / MANIFEST_NAME


def read_manifest(directory) -> tuple[DatasetManifest, np.ndarray]:
    d = Path(directory)
    try:
        doc = json.loads((d / MANIFEST_NAME).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{d / MANIFEST_NAME}: invalid JSON ({exc})") from exc
    header = doc.get("header", {})
    if header.get("format") != MANIFEST_FORMAT:
        raise VersionMismatch(f"{d}: not a manifest (format={header.get('format')!r})")
    if header.get("version") != MANIFEST_VERSION:
        raise VersionMismatch(f"{d}: manifest version {header.get('version')}, expected {MANIFEST_VERSION}")
    cache = read_cache(d / header.get("cache", CACHE_NAME))
    io_dim = int(header["io_dim"])
    if cache.shape[0] and cache.shape[1] != io_dim:
        raise FormatError(f"{d}: cache dim {cache.shape[1]} != header io_dim {io_dim}")
    entries = []
    for item in doc.get("records", []):
        try:
            rec = AnnotationRecord.from_json(item["record"])
        except MalformedRecord as exc:
            raise FormatError(str(exc)) from exc
        entry = ManifestEntry(rec, item["refs"], item.get("split", "train"))
        first, n = entry.row_span
        if first < 0 or first + n > cache.shape[0]:
            raise FormatError(f"{d}: record {rec.image_id!r} references rows beyond cache size {cache.shape[0]}")
        entries.append(entry)
    if header.get("counts", {}).get("records") != len(entries):
        raise FormatError(f"{d}: header counts {header.get('counts')} != {len(entries)} records")
    index_path = d / header.get("index", INDEX_NAME)
    if index_path.exists():
        index = json.loads(index_path.read_text(encoding="utf-8"))
        for e in entries:
            if index.get(e.record.image_id) != list(e.row_span):
                raise FormatError(f"{d}: index disagrees for {e.record.image_id!r}")
    return DatasetManifest(io_dim, entries, header.get("provenance", {})), cache


def entry_arrays(entry: ManifestEntry, cache: np.ndarray) -> dict:
    """Slice one record's embeddings out of the cache."""
    r = entry.refs
    t0, tn = r["tokens"]
    s0, sn = r["subjects"]
    return {
        "tokens": cache[t0:t0 + tn],
        "subjects": cache[s0:s0 + sn],
        "edge": None if r.get("edge") is None else cache[r["edge"]],
        "target": cache[r["target"]],
        "pooled": cache[r["pooled"]],
    }


def manifest_stats(manifest: DatasetManifest, max_subjects: int = 4) -> dict:
    """Histogram of subjects per image and the number of distinct subject labels."""
    hist = {k: 0 for k in range(1, max_subjects + 1)}
    labels = set()
    for e in manifest.entries:
        k = e.record.n_subjects
        hist[k] = hist.get(k, 0) + 1
        labels.update(s.label for s in e.record.subject_spans)
    return {"subjects_per_image": hist, "unique_subjects": len(labels), "records": len(manifest.entries)}


def files_of(directory) -> list[Path]:
    d = Path(directory)
    return [d / MANIFEST_NAME, d / CACHE_NAME, d / INDEX_NAME]

