"""Prior training objective: projection MSE plus a weighted contrastive term.

For a batch of N predictions ``z_hat`` with image targets ``z_x`` and pooled
caption embeddings ``z_y``::

    projection  = mean_i ||z_x[i] - z_hat[i]||^2
    contrastive = -(lam / N) * sum_i log softmax_j(<z_hat[i], z_y[j]> / tau)[i]
    total       = projection + contrastive

The inner product is taken between L2-normalized rows unless
``normalize_before_dot`` is off. The softmax runs over captions only (image
rows against text columns); there is no symmetric text-to-image term.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .tensorcore import Tape, Tensor


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.2
    tau: float = 0.07
    normalize_before_dot: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown LossConfig field(s): {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class LossBreakdown:
    projection: float
    contrastive: float
    total: float
    batch_n: int


def _check(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.ndim != 2 or a.shape != b.shape:
        raise ValueError(f"{what}: shapes {a.shape} and {b.shape} must be equal (N, d)")


def projection_term(tape: Tape, z_hat: Tensor, z_x: np.ndarray) -> Tensor:
    _check(z_hat.data, np.asarray(z_x), "projection_loss")
    return tape.mse(z_hat, tape.const(z_x))


def contrastive_term(tape: Tape, z_hat: Tensor, z_y: np.ndarray, cfg: LossConfig) -> Tensor:
    z_y = np.asarray(z_y)
    _check(z_hat.data, z_y, "contrastive_loss")
    n = z_hat.shape[0]
    q = tape.l2_normalize_rows(z_hat) if cfg.normalize_before_dot else z_hat
    if cfg.normalize_before_dot:
        norms = np.linalg.norm(z_y, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ValueError("contrastive_loss: zero-norm caption embedding")
        z_y = z_y / norms
    logits = tape.scale(tape.matmul(q, tape.const(z_y), transpose_b=True), 1.0 / cfg.tau)
    logp = tape.log_softmax_rows(logits)
    diag = tape.sum(tape.mul(logp, tape.const(np.eye(n))))
    return tape.scale(diag, -cfg.lam / n)


def total_term(tape: Tape, z_hat: Tensor, z_x, z_y, cfg: LossConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Record the full objective; returns (total, projection, contrastive) nodes."""
    proj = projection_term(tape, z_hat, z_x)
    con = contrastive_term(tape, z_hat, z_y, cfg)
    return tape.add(proj, con), proj, con


def breakdown(proj: Tensor, con: Tensor, n: int) -> LossBreakdown:
    # + 0.0 turns the -0.0 of an all-zero contrastive sum into 0.0
    p, c = float(proj.data) + 0.0, float(con.data) + 0.0
    return LossBreakdown(p, c, p + c, n)


def projection_loss(z_hat, z_x) -> float:
    tape = Tape()
    return float(projection_term(tape, tape.const(z_hat), np.asarray(z_x)).data)


def contrastive_loss(z_hat, z_y, cfg: LossConfig | None = None) -> float:
    tape = Tape()
    return float(contrastive_term(tape, tape.const(z_hat), z_y, cfg or LossConfig()).data) + 0.0


def total_loss(z_hat, z_x, z_y, cfg: LossConfig | None = None) -> LossBreakdown:
    """Evaluate the objective on plain arrays."""
    cfg = cfg or LossConfig()
    tape = Tape()
    zh = tape.const(z_hat)
    _, proj, con = total_term(tape, zh, z_x, z_y, cfg)
    return breakdown(proj, con, zh.shape[0])


def total_loss_and_grad(z_hat, z_x, z_y, cfg: LossConfig | None = None) -> tuple[LossBreakdown, np.ndarray]:
    """Objective value and its gradient with respect to ``z_hat`` (targets held constant)."""
    cfg = cfg or LossConfig()
    tape = Tape()
    zh = tape.leaf(z_hat, name="z_hat")
    total, proj, con = total_term(tape, zh, z_x, z_y, cfg)
    grads = tape.backward(total)
    return breakdown(proj, con, zh.shape[0]), grads["z_hat"]
