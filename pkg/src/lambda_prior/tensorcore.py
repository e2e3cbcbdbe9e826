"""Small dense-tensor engine with tape-based reverse-mode differentiation.

Every kernel call appends a node to a :class:`Tape`. A node keeps the input
node indices and whatever the backward rule needs; ``Tape.backward`` walks the
nodes in reverse and returns gradients for the leaves that asked for them.

Broadcasting is deliberately narrow. ``add`` accepts either identical shapes
or a right operand whose shape is a trailing suffix of the left one (a bias or
positional table shared over the batch); ``scale`` multiplies by a Python
scalar. Everything else must match exactly.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Sequence

import numpy as np

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715

_FLOAT_MODE = {"dtype": np.dtype(np.float32)}


def set_float_mode(mode: str) -> None:
    """Select ``"float32"`` (training default) or ``"float64"`` (verification)."""
    if mode not in ("float32", "float64"):
        raise ValueError(f"unknown float mode {mode!r}")
    _FLOAT_MODE["dtype"] = np.dtype(mode)


def float_dtype() -> np.dtype:
    return _FLOAT_MODE["dtype"]


@contextlib.contextmanager
def float_mode(mode: str) -> Iterator[None]:
    previous = _FLOAT_MODE["dtype"]
    set_float_mode(mode)
    try:
        yield
    finally:
        _FLOAT_MODE["dtype"] = previous


class ShapeError(ValueError):
    def __init__(self, kernel: str, shapes: Sequence[tuple[int, ...]], detail: str = ""):
        self.kernel = kernel
        self.shapes = [tuple(s) for s in shapes]
        msg = f"{kernel}: incompatible extents {self.shapes}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NumericFault(FloatingPointError):
    def __init__(self, kernel: str, count: int):
        self.kernel = kernel
        self.count = count
        super().__init__(f"{kernel}: produced {count} non-finite value(s)")


class TapeError(RuntimeError):
    pass


class Tensor:
    """Handle to one node on a tape. The wrapped array is read-only."""

    __slots__ = ("tape", "index", "data", "requires_grad", "name")

    def __init__(self, tape: "Tape", index: int, data: np.ndarray, requires_grad: bool, name: str | None):
        data.flags.writeable = False
        self.tape = tape
        self.index = index
        self.data = data
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor(#{self.index}{label}, shape={self.shape}, dtype={self.data.dtype})"

    # Operator sugar; each delegates to the owning tape.
    def __add__(self, other: "Tensor") -> "Tensor":
        return self.tape.add(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return self.tape.matmul(self, other)

    def __mul__(self, other: "Tensor | float") -> "Tensor":
        if isinstance(other, Tensor):
            return self.tape.mul(self, other)
        return self.tape.scale(self, float(other))


@dataclass
class _Node:
    kernel: str
    inputs: tuple[int, ...]
    ctx: Any
    requires_grad: bool


@dataclass
class _Kernel:
    forward: Callable[..., tuple[np.ndarray, Any]]
    backward: Callable[[Any, np.ndarray], tuple[np.ndarray | None, ...]]


KERNELS: dict[str, _Kernel] = {}


def _register(name: str):
    def wrap(cls):
        KERNELS[name] = _Kernel(cls.forward, cls.backward)
        return cls

    return wrap


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead)))


@_register("matmul")
class _MatMul:
    @staticmethod
    def forward(a, b, transpose_b=False):
        bt = np.swapaxes(b, -1, -2) if transpose_b else b
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != bt.shape[-2]:
            raise ShapeError("matmul", [a.shape, b.shape], "inner extents differ")
        if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
            raise ShapeError("matmul", [a.shape, b.shape], "leading extents differ")
        return np.matmul(a, bt), (a, b, transpose_b)

    @staticmethod
    def backward(ctx, g):
        a, b, transpose_b = ctx
        bt = np.swapaxes(b, -1, -2) if transpose_b else b
        ga = np.matmul(g, np.swapaxes(bt, -1, -2))
        if b.ndim == 2:
            a2 = a.reshape(-1, a.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            gbt = a2.T @ g2
        else:
            gbt = np.matmul(np.swapaxes(a, -1, -2), g)
        gb = np.swapaxes(gbt, -1, -2) if transpose_b else gbt
        return ga, gb


@_register("add")
class _Add:
    @staticmethod
    def forward(a, b):
        if a.shape != b.shape and (b.ndim > a.ndim or a.shape[a.ndim - b.ndim:] != b.shape):
            raise ShapeError("add", [a.shape, b.shape], "right operand must match or be a trailing suffix")
        return a + b, b.shape

    @staticmethod
    def backward(b_shape, g):
        return g, _reduce_to(g, b_shape)


@_register("mul")
class _Mul:
    @staticmethod
    def forward(a, b):
        if a.shape != b.shape:
            raise ShapeError("mul", [a.shape, b.shape])
        return a * b, (a, b)

    @staticmethod
    def backward(ctx, g):
        a, b = ctx
        return g * b, g * a


@_register("scale")
class _Scale:
    @staticmethod
    def forward(a, factor):
        return a * a.dtype.type(factor), factor

    @staticmethod
    def backward(factor, g):
        return (g * g.dtype.type(factor),)


@_register("sum")
class _Sum:
    @staticmethod
    def forward(a):
        return np.asarray(a.sum(), dtype=a.dtype), a.shape

    @staticmethod
    def backward(shape, g):
        return (np.broadcast_to(g, shape).copy(),)


@_register("layer_norm")
class _LayerNorm:
    @staticmethod
    def forward(x, gamma, beta):
        d = x.shape[-1]
        if gamma.shape != (d,) or beta.shape != (d,):
            raise ShapeError("layer_norm", [x.shape, gamma.shape, beta.shape])
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        rstd = 1.0 / np.sqrt(var + x.dtype.type(LN_EPS))
        xhat = xc * rstd
        return xhat * gamma + beta, (xhat, rstd, gamma)

    @staticmethod
    def backward(ctx, g):
        xhat, rstd, gamma = ctx
        d = xhat.shape[-1]
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gx_hat = g * gamma
        gx = rstd * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / d
        )
        return gx, ggamma, gbeta


@_register("softmax_rows")
class _Softmax:
    @staticmethod
    def forward(x, mask=None):
        z = x if mask is None else x + mask
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=-1, keepdims=True)
        return p, p

    @staticmethod
    def backward(p, g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)


@_register("log_softmax_rows")
class _LogSoftmax:
    @staticmethod
    def forward(x):
        z = x - x.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
        out = z - lse
        return out, out

    @staticmethod
    def backward(out, g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)


@_register("gelu")
class _Gelu:
    @staticmethod
    def forward(x):
        c = x.dtype.type(_GELU_C)
        k = x.dtype.type(_GELU_K)
        t = np.tanh(c * (x + k * (x * x * x)))
        return 0.5 * x * (1.0 + t), (x, t)

    @staticmethod
    def backward(ctx, g):
        x, t = ctx
        c = x.dtype.type(_GELU_C)
        k = x.dtype.type(_GELU_K)
        dt = (1.0 - t * t) * c * (1.0 + 3.0 * k * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)


@_register("concat_rows")
class _Concat:
    @staticmethod
    def forward(*parts):
        ref = parts[0].shape
        for p in parts[1:]:
            if p.ndim != len(ref) or p.shape[:-2] != ref[:-2] or p.shape[-1] != ref[-1]:
                raise ShapeError("concat_rows", [q.shape for q in parts])
        sizes = [p.shape[-2] for p in parts]
        return np.concatenate(parts, axis=-2), sizes

    @staticmethod
    def backward(sizes, g):
        cuts = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, cuts, axis=-2))


@_register("slice_rows")
class _Slice:
    @staticmethod
    def forward(x, start, stop):
        n = x.shape[-2]
        if not 0 <= start < stop <= n:
            raise ShapeError("slice_rows", [x.shape], f"rows [{start}, {stop}) out of range")
        return x[..., start:stop, :].copy(), (x.shape, start, stop)

    @staticmethod
    def backward(ctx, g):
        shape, start, stop = ctx
        gx = np.zeros(shape, dtype=g.dtype)
        gx[..., start:stop, :] = g
        return (gx,)


@_register("reshape")
class _Reshape:
    @staticmethod
    def forward(x, shape):
        shape = tuple(shape)
        if math.prod(shape) != x.size:
            raise ShapeError("reshape", [x.shape, shape])
        return x.reshape(shape), x.shape

    @staticmethod
    def backward(shape, g):
        return (g.reshape(shape),)


@_register("swap_axes")
class _SwapAxes:
    @staticmethod
    def forward(x, a1, a2):
        return np.ascontiguousarray(np.swapaxes(x, a1, a2)), (a1, a2)

    @staticmethod
    def backward(ctx, g):
        a1, a2 = ctx
        return (np.ascontiguousarray(np.swapaxes(g, a1, a2)),)


@_register("embed")
class _Embed:
    """Row gather from a table; index -1 yields a zero row."""

    @staticmethod
    def forward(table, ids):
        ids = np.asarray(ids)
        if table.ndim != 2 or ids.size and (ids.max() >= table.shape[0] or ids.min() < -1):
            raise ShapeError("embed", [table.shape, ids.shape], "index out of table range")
        safe = np.where(ids < 0, 0, ids)
        out = table[safe]
        out[ids < 0] = 0.0
        return out, (table.shape, ids)

    @staticmethod
    def backward(ctx, g):
        shape, ids = ctx
        gt = np.zeros(shape, dtype=g.dtype)
        keep = ids >= 0
        np.add.at(gt, ids[keep], g[keep])
        return (gt,)


@_register("l2_normalize_rows")
class _L2Normalize:
    @staticmethod
    def forward(x):
        norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
        if np.any(norm == 0):
            raise NumericFault("l2_normalize_rows", int((norm == 0).sum()))
        y = x / norm
        return y, (y, norm)

    @staticmethod
    def backward(ctx, g):
        y, norm = ctx
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)


@_register("mse")
class _Mse:
    """Mean over leading rows of the squared L2 distance along the last axis."""

    @staticmethod
    def forward(a, b):
        if a.shape != b.shape or a.ndim != 2:
            raise ShapeError("mse", [a.shape, b.shape])
        d = a - b
        n = a.shape[0]
        return np.asarray((d * d).sum() / n, dtype=a.dtype), (d, n)

    @staticmethod
    def backward(ctx, g):
        d, n = ctx
        ga = (2.0 / n) * g * d
        return ga, -ga


_ATTR_ARGS = {
    "matmul": ("transpose_b",),
    "scale": ("factor",),
    "softmax_rows": ("mask",),
    "slice_rows": ("start", "stop"),
    "reshape": ("shape",),
    "swap_axes": ("a1", "a2"),
    "embed": ("ids",),
}


class Tape:
    """Append-only record of kernel executions.

    Single writer. One ``backward`` per tape; build a new tape for the next
    step.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.values: list[Tensor] = []
        self._consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, data, name: str | None = None, requires_grad: bool = True) -> Tensor:
        arr = np.array(data, dtype=float_dtype(), copy=True)
        if not np.all(np.isfinite(arr)):
            raise NumericFault(f"leaf {name or len(self.nodes)}", int((~np.isfinite(arr)).sum()))
        return self._push("leaf", (), None, arr, requires_grad, name)

    def const(self, data, name: str | None = None) -> Tensor:
        return self.leaf(data, name=name, requires_grad=False)

    def _push(self, kernel, inputs, ctx, out, requires_grad, name=None) -> Tensor:
        if self._consumed:
            raise TapeError("tape already consumed by backward")
        self.nodes.append(_Node(kernel, inputs, ctx, requires_grad))
        t = Tensor(self, len(self.nodes) - 1, out, requires_grad, name)
        self.values.append(t)
        return t

    def apply(self, kernel: str, *inputs: Tensor, **attrs) -> Tensor:
        """Run one registered kernel and record it."""
        try:
            k = KERNELS[kernel]
        except KeyError:
            raise ValueError(f"unknown kernel {kernel!r}") from None
        for x in inputs:
            if x.tape is not self:
                raise TapeError(f"{kernel}: input {x!r} belongs to another tape")
        # Non-finite results surface as NumericFault just below, so numpy's own warnings are noise.
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            out, ctx = k.forward(*(x.data for x in inputs), **attrs)
        out = np.asarray(out)
        bad = out.size - int(np.isfinite(out).sum())
        if bad:
            raise NumericFault(kernel, bad)
        rg = any(x.requires_grad for x in inputs)
        return self._push(kernel, tuple(x.index for x in inputs), ctx if rg else None, out, rg)

    # Named wrappers keep call sites readable.
    def matmul(self, a, b, transpose_b=False):
        return self.apply("matmul", a, b, transpose_b=transpose_b)

    def add(self, a, b):
        return self.apply("add", a, b)

    def mul(self, a, b):
        return self.apply("mul", a, b)

    def scale(self, a, factor):
        return self.apply("scale", a, factor=factor)

    def sum(self, a):
        return self.apply("sum", a)

    def layer_norm(self, x, gamma, beta):
        return self.apply("layer_norm", x, gamma, beta)

    def softmax_rows(self, x, mask=None):
        return self.apply("softmax_rows", x, mask=mask)

    def log_softmax_rows(self, x):
        return self.apply("log_softmax_rows", x)

    def gelu(self, x):
        return self.apply("gelu", x)

    def concat_rows(self, *parts):
        return self.apply("concat_rows", *parts)

    def slice_rows(self, x, start, stop):
        return self.apply("slice_rows", x, start=start, stop=stop)

    def reshape(self, x, shape):
        return self.apply("reshape", x, shape=tuple(shape))

    def swap_axes(self, x, a1, a2):
        return self.apply("swap_axes", x, a1=a1, a2=a2)

    def embed(self, table, ids):
        return self.apply("embed", table, ids=np.asarray(ids, dtype=np.int64))

    def l2_normalize_rows(self, x):
        return self.apply("l2_normalize_rows", x)

    def mse(self, a, b):
        return self.apply("mse", a, b)

    def backward(self, root: Tensor) -> dict[str, np.ndarray]:
        """Gradients of scalar ``root`` for every leaf with ``requires_grad``.

        Keys are leaf names; unnamed leaves are keyed ``"#<index>"``.
        """
        if self._consumed:
            raise TapeError("backward already run on this tape")
        if root.tape is not self:
            raise TapeError("root belongs to another tape")
        if root.data.size != 1:
            raise TapeError(f"backward root must be scalar, got shape {root.shape}")
        self._consumed = True
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[root.index] = np.ones_like(root.data)
        out: dict[str, np.ndarray] = {}
        for i in range(root.index, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or not node.requires_grad:
                continue
            if node.kernel == "leaf":
                t = self.values[i]
                out[t.name if t.name is not None else f"#{i}"] = g
                continue
            in_grads = KERNELS[node.kernel].backward(node.ctx, g)
            for j, gj in zip(node.inputs, in_grads):
                if gj is None or not self.nodes[j].requires_grad:
                    continue
                grads[j] = gj if grads[j] is None else grads[j] + gj
            grads[i] = None
            node.ctx = None
        for t in self.values:
            if t.requires_grad and self.nodes[t.index].kernel == "leaf":
                out.setdefault(t.name if t.name is not None else f"#{t.index}", np.zeros_like(t.data))
        # Tensors point back at their tape; dropping the tape's side of that
        # cycle lets intermediates go as soon as the step ends.
        self.values = []
        self.nodes = []
        return out


@dataclass
class GradCheckReport:
    max_rel_err: float
    mean_rel_err: float
    per_param: dict[str, float] = field(default_factory=dict)
    worst: str = ""

    def passed(self, tol: float) -> bool:
        return self.max_rel_err <= tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps vanishing gradients from dividing finite-difference
    round-off by zero.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return np.abs(a - n) / denom


def finite_diff_check(
    scalar_fn: Callable[[dict[str, np.ndarray]], float],
    params: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    step: float = 1e-4,
    floor: float = 1e-6,
    points: int = 5,
) -> GradCheckReport:
    """Compare ``analytic`` gradients with central differences of ``scalar_fn``.

    ``points`` selects the symmetric stencil: 3 gives ``(f(x+h) - f(x-h)) / 2h``
    with O(h^2) truncation, 5 adds the ``x +- 2h`` evaluations for O(h^4).
    ``scalar_fn`` receives the full parameter dict and must be deterministic.
    Parameters are perturbed in place on float64 copies and restored.
    """
    if points not in (3, 5):
        raise ValueError("points must be 3 or 5")
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    per: dict[str, float] = {}
    all_errs = []

    def at(flat, i, x):
        flat[i] = x
        return scalar_fn(work)

    for name in sorted(work):
        p = work[name]
        flat = p.reshape(-1)
        num = np.empty_like(flat)
        for i in range(flat.size):
            x = flat[i]
            d1 = at(flat, i, x + step) - at(flat, i, x - step)
            if points == 3:
                num[i] = d1 / (2.0 * step)
            else:
                d2 = at(flat, i, x + 2 * step) - at(flat, i, x - 2 * step)
                num[i] = (8.0 * d1 - d2) / (12.0 * step)
            flat[i] = x
        err = relative_error(np.asarray(analytic[name]).reshape(-1), num, floor)
        per[name] = float(err.max()) if err.size else 0.0
        all_errs.append(err)
    errs = np.concatenate(all_errs) if all_errs else np.zeros(1)
    worst = max(per, key=per.get) if per else ""
    return GradCheckReport(float(errs.max()), float(errs.mean()), per, worst)
