"""Binary checkpoint format.

Layout (all integers little-endian)::

    12s magic  b"LPRIOR-CKPT\\0"
    u32 version
    u32 config_len, config_len bytes of sorted-key JSON (PriorConfig)
    u32 n_tensors, then per tensor in sorted-name order:
        u32 name_len, name (utf-8), u32 rank, rank x u32 extents, float32 data
    optional training trailer:
        4s b"ADAM", u64 step, u32 n_tensors, tensors as above

The trailer carries optimizer moments named ``m/<param>`` and ``v/<param>``.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..dataprep.manifest import FormatError, VersionMismatch
from .model import PriorConfig, PriorParams

MAGIC = b"LPRIOR-CKPT\0"
VERSION = 1
TRAILER = b"ADAM"


@dataclass
class TrainState:
    step: int
    moments: dict[str, np.ndarray]


def _write_tensors(buf: io.BytesIO, tensors: dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())


class _Reader:
    def __init__(self, raw: bytes, source: str):
        self.raw, self.pos, self.source = raw, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.source}: truncated at byte {self.pos} (wanted {n} more)")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for _ in range(self.u32()):
            name = self.take(self.u32()).decode("utf-8")
            rank = self.u32()
            shape = struct.unpack(f"<{rank}I", self.take(4 * rank))
            n = int(np.prod(shape)) if rank else 1
            out[name] = np.frombuffer(self.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
        return out


def checkpoint_bytes(params: PriorParams, state: TrainState | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    cfg = json.dumps(params.config.to_dict(), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    _write_tensors(buf, params.arrays)
    if state is not None:
        buf.write(TRAILER)
        buf.write(struct.pack("<Q", state.step))
        _write_tensors(buf, state.moments)
    return buf.getvalue()


def save_checkpoint(path, params: PriorParams, state: TrainState | None = None) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(params, state))
    tmp.replace(path)


def parse_checkpoint(raw: bytes, source: str = "<bytes>") -> tuple[PriorParams, TrainState | None]:
    r = _Reader(raw, source)
    magic = r.take(len(MAGIC))
    if magic != MAGIC:
        raise VersionMismatch(f"{source}: bad magic {magic!r}")
    version = r.u32()
    if version != VERSION:
        raise VersionMismatch(f"{source}: checkpoint version {version}, expected {VERSION}")
    try:
        cfg = PriorConfig.from_dict(json.loads(r.take(r.u32()).decode("utf-8")))
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{source}: bad config block ({exc})") from exc
    tensors = r.tensors()
    try:
        params = PriorParams(cfg, tensors)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{source}: {exc}") from exc
    state = None
    if r.pos < len(raw):
        if r.take(4) != TRAILER:
            raise FormatError(f"{source}: unexpected bytes after parameters")
        step = struct.unpack("<Q", r.take(8))[0]
        state = TrainState(step, r.tensors())
        if r.pos != len(raw):
            raise FormatError(f"{source}: {len(raw) - r.pos} trailing bytes")
    return params, state


def load_checkpoint(path) -> tuple[PriorParams, TrainState | None]:
    return parse_checkpoint(Path(path).read_bytes(), str(path))
