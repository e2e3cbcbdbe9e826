"""Transformer prior: interleaved slot sequence -> predicted image embedding.

Slots are projected from ``io_dim`` to ``model_dim``, given learned absolute
positions, mixed by ``n_layers`` bidirectional pre-norm attention/MLP blocks,
and the final state of the trailing query slot is projected back to
``io_dim``. There is no timestep input: the prior is a single-pass regressor,
not a denoiser.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from ..dataprep.interleave import AUX, N_AUX, QUERY, InterleavedSequence
from ..tensorcore import Tape, Tensor, float_dtype

MASK_NEG = -1e30
NULL_STD = 0.02


class PriorInputError(ValueError):
    pass


@dataclass(frozen=True)
class PriorConfig:
    n_layers: int = 10
    n_heads: int = 16
    head_dim: int = 32
    io_dim: int = 1280
    mlp_ratio: int = 4
    n_aux: int = N_AUX
    max_seq: int = 82  # 77 caption tokens + 4 auxiliary + 1 query
    noise_token: bool = False
    seed: int = 0

    def __post_init__(self):
        for f in ("n_heads", "head_dim", "io_dim", "mlp_ratio", "max_seq"):
            if getattr(self, f) < 1:
                raise ValueError(f"PriorConfig.{f} must be positive")
        if self.n_layers < 0:
            raise ValueError("PriorConfig.n_layers must be >= 0")
        if self.n_aux != N_AUX:
            raise ValueError(f"PriorConfig.n_aux must be {N_AUX}")
        if self.max_seq < self.n_aux + 1 + int(self.noise_token):
            raise ValueError("max_seq leaves no room for auxiliary and query slots")

    @property
    def model_dim(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def mlp_dim(self) -> int:
        return self.mlp_ratio * self.model_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PriorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown PriorConfig field(s): {sorted(unknown)}")
        return cls(**d)


def param_shapes(cfg: PriorConfig) -> dict[str, tuple[int, ...]]:
    d, io = cfg.model_dim, cfg.io_dim
    shapes: dict[str, tuple[int, ...]] = {
        "aux_null": (cfg.n_aux, io),
        "query": (1, io),
        "in_proj": (io, d),
        "pos": (cfg.max_seq, d),
        "final_ln.g": (d,),
        "final_ln.b": (d,),
        "out_proj": (d, io),
    }
    if cfg.noise_token:
        shapes["noise_proj"] = (io, d)
    for i in range(cfg.n_layers):
        p = f"layers.{i:02d}."
        shapes.update(
            {
                p + "ln1.g": (d,),
                p + "ln1.b": (d,),
                p + "attn.wq": (d, d),
                p + "attn.wk": (d, d),
                p + "attn.wv": (d, d),
                p + "attn.wo": (d, d),
                p + "ln2.g": (d,),
                p + "ln2.b": (d,),
                p + "mlp.w1": (d, cfg.mlp_dim),
                p + "mlp.w2": (cfg.mlp_dim, d),
            }
        )
    return dict(sorted(shapes.items()))


def param_count(cfg: PriorConfig) -> int:
    """Closed-form count of learnable scalars."""
    d, io, L = cfg.model_dim, cfg.io_dim, cfg.n_layers
    per_layer = 4 * d * d + 2 * d * cfg.mlp_dim + 4 * d
    embeds = (cfg.n_aux + 1) * io + cfg.max_seq * d
    projections = 2 * io * d + (io * d if cfg.noise_token else 0)
    return L * per_layer + embeds + projections + 2 * d


class PriorParams:
    """Named parameter arrays for one :class:`PriorConfig`, in sorted-name order."""

    def __init__(self, config: PriorConfig, arrays: dict[str, np.ndarray]):
        expected = param_shapes(config)
        if set(arrays) != set(expected):
            raise KeyError(f"parameter names differ: missing {sorted(set(expected) - set(arrays))}, "
                           f"unexpected {sorted(set(arrays) - set(expected))}")
        for k, shape in expected.items():
            if arrays[k].shape != shape:
                raise ValueError(f"{k}: shape {arrays[k].shape} != {shape}")
        self.config = config
        self.arrays = {k: arrays[k] for k in sorted(arrays)}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    def items(self):
        return self.arrays.items()

    @property
    def count(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def copy(self) -> "PriorParams":
        return PriorParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def astype(self, dtype) -> "PriorParams":
        return PriorParams(self.config, {k: v.astype(dtype) for k, v in self.arrays.items()})

    def bind(self, tape: Tape, requires_grad: bool = True) -> dict[str, Tensor]:
        return {k: tape.leaf(v, name=k, requires_grad=requires_grad) for k, v in self.arrays.items()}


def init_params(config: PriorConfig, seed: int | None = None) -> PriorParams:
    """Deterministic initialization.

    Projections draw from N(0, 1/model_dim); layer norms start at identity;
    learned null, query and position embeddings draw from N(0, 0.02^2).
    """
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5052494F]))
    dtype = float_dtype()
    std = config.model_dim ** -0.5
    arrays = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".g"):
            a = np.ones(shape)
        elif name.endswith(".b"):
            a = np.zeros(shape)
        elif name in ("aux_null", "query", "pos"):
            a = rng.normal(0.0, NULL_STD, shape)
        else:
            a = rng.normal(0.0, std, shape)
        arrays[name] = a.astype(dtype)
    return PriorParams(config, arrays)


@dataclass
class Batch:
    """Right-aligned, padded batch of interleaved sequences.

    Column ``T-1`` is always the query slot. ``learned_ids`` selects rows of
    the learned table ``[aux_null; query]`` (-1 where the slot carries data or
    padding). ``pos_ids`` is -1 on padding.
    """

    x: np.ndarray  # (B, T, io_dim)
    learned_ids: np.ndarray  # (B, T) int
    pos_ids: np.ndarray  # (B, T) int
    key_mask: np.ndarray  # (B, 1, 1, T) additive
    lengths: np.ndarray  # (B,)
    edge_col: np.ndarray  # (B,) column of each sample's edge slot
    noise_col: int | None = None

    @property
    def size(self) -> int:
        return self.x.shape[0]

    def drop_edges(self, drop: np.ndarray) -> "Batch":
        """Copy with the edge slot of every sample where ``drop`` is true reverted to its learned null."""
        drop = np.asarray(drop, dtype=bool)
        x = self.x.copy()
        ids = self.learned_ids.copy()
        rows = np.nonzero(drop)[0]
        cols = self.edge_col[rows]
        x[rows, cols] = 0.0
        ids[rows, cols] = 0
        return Batch(x, ids, self.pos_ids, self.key_mask, self.lengths, self.edge_col, self.noise_col)


def collate(seqs: Sequence[InterleavedSequence], config: PriorConfig) -> Batch:
    if not seqs:
        raise PriorInputError("empty batch")
    extra = int(config.noise_token)
    lengths = np.array([len(s) + extra for s in seqs])
    if lengths.max() > config.max_seq:
        raise PriorInputError(f"sequence of {lengths.max()} slots exceeds max_seq={config.max_seq}")
    B, T, io = len(seqs), int(lengths.max()), config.io_dim
    x = np.zeros((B, T, io), dtype=float_dtype())
    learned = np.full((B, T), -1, dtype=np.int64)
    pos = np.full((B, T), -1, dtype=np.int64)
    mask = np.zeros((B, 1, 1, T), dtype=float_dtype())
    edge_col = np.zeros(B, dtype=np.int64)
    for b, s in enumerate(seqs):
        if s.io_dim != io:
            raise PriorInputError(f"slot dim {s.io_dim} != io_dim {io}")
        if s.kinds[-1] != QUERY or s.count(QUERY) != 1 or s.count(AUX) != config.n_aux:
            raise PriorInputError("sequence must end with its single query slot after the auxiliary slots")
        L = lengths[b]
        start = T - L
        n = len(s)
        body = n - 1  # everything but the query
        x[b, start:start + body] = s.embeds[:body]
        pos[b, start:] = np.arange(L)
        mask[b, 0, 0, :start] = MASK_NEG
        a0 = start + s.aux_start
        edge_col[b] = a0
        for k, filled in enumerate(s.aux_filled):
            if not filled:
                learned[b, a0 + k] = k
        learned[b, T - 1] = config.n_aux
    return Batch(x, learned, pos, mask, lengths, edge_col, T - 2 if extra else None)


def forward(
    tape: Tape,
    p: dict[str, Tensor],
    config: PriorConfig,
    batch: Batch,
    noise: np.ndarray | None = None,
    attn_log: list | None = None,
) -> Tensor:
    """Record the prior's forward pass on ``tape``; returns (B, io_dim) predictions.

    ``noise`` (B, io_dim) feeds the optional noise slot and is required when
    ``config.noise_token`` is set. Attention probabilities are appended to
    ``attn_log`` if given.
    """
    B, T, io = batch.x.shape
    d, H, dh = config.model_dim, config.n_heads, config.head_dim
    learned_table = tape.concat_rows(p["aux_null"], p["query"])
    slots = tape.add(tape.const(batch.x), tape.embed(learned_table, batch.learned_ids))
    h = tape.matmul(slots, p["in_proj"])
    if config.noise_token:
        if noise is None or np.shape(noise) != (B, io):
            raise PriorInputError(f"noise of shape ({B}, {io}) required when noise_token is enabled")
        nz = tape.reshape(tape.matmul(tape.const(noise), p["noise_proj"]), (B, 1, d))
        parts = [nz, tape.const(np.zeros((B, 1, d)))]
        if T > 2:
            parts.insert(0, tape.const(np.zeros((B, T - 2, d))))
        h = tape.add(h, tape.concat_rows(*parts))
    h = tape.add(h, tape.embed(p["pos"], batch.pos_ids))
    mask = batch.key_mask
    inv = 1.0 / math.sqrt(dh)
    for i in range(config.n_layers):
        pre = f"layers.{i:02d}."
        a = tape.layer_norm(h, p[pre + "ln1.g"], p[pre + "ln1.b"])

        def heads(w):
            return tape.swap_axes(tape.reshape(tape.matmul(a, p[pre + w]), (B, T, H, dh)), 1, 2)

        q, k, v = heads("attn.wq"), heads("attn.wk"), heads("attn.wv")
        att = tape.softmax_rows(tape.scale(tape.matmul(q, k, transpose_b=True), inv), mask=mask)
        if attn_log is not None:
            attn_log.append(att.data)
        o = tape.reshape(tape.swap_axes(tape.matmul(att, v), 1, 2), (B, T, d))
        h = tape.add(h, tape.matmul(o, p[pre + "attn.wo"]))
        m = tape.layer_norm(h, p[pre + "ln2.g"], p[pre + "ln2.b"])
        m = tape.matmul(tape.gelu(tape.matmul(m, p[pre + "mlp.w1"])), p[pre + "mlp.w2"])
        h = tape.add(h, m)
    hq = tape.reshape(tape.slice_rows(h, T - 1, T), (B, d))
    hq = tape.layer_norm(hq, p["final_ln.g"], p["final_ln.b"])
    return tape.matmul(hq, p["out_proj"])


def predict(
    params: PriorParams,
    seqs: Sequence[InterleavedSequence],
    batch_size: int = 256,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """Forward without gradients, in chunks; returns (n, io_dim)."""
    cfg = params.config
    out = []
    for s in range(0, len(seqs), batch_size):
        chunk = seqs[s:s + batch_size]
        tape = Tape()
        bound = params.bind(tape, requires_grad=False)
        nz = None if noise is None else noise[s:s + len(chunk)]
        out.append(forward(tape, bound, cfg, collate(chunk, cfg), noise=nz).data)
    return np.concatenate(out) if out else np.zeros((0, cfg.io_dim))
