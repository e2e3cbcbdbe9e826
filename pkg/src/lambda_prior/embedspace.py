"""Embedding-vector helpers: normalization, cosine, slerp and 2-D interpolation grids."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

NORM_TOL = 1e-6
ANTIPODAL_TOL = 1e-12


class EmbeddingError(ValueError):
    pass


def as_vec(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise EmbeddingError(f"expected a non-empty 1-D vector, got shape {v.shape}")
    return v


def normalize(x) -> np.ndarray:
    v = as_vec(x)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise EmbeddingError("cannot normalize a zero vector")
    return v / n


def is_unit(x, tol: float = NORM_TOL) -> bool:
    return abs(np.linalg.norm(as_vec(x)) - 1.0) <= tol


def ensure_unit(x, tol: float = NORM_TOL) -> np.ndarray:
    """Return ``x`` if it is unit length within ``tol``; otherwise renormalize with a warning."""
    v = as_vec(x)
    if is_unit(v, tol):
        return v
    log.warning("re-normalizing embedding with norm %.9g", np.linalg.norm(v))
    return normalize(v)


def cosine(a, b) -> float:
    a, b = as_vec(a), as_vec(b)
    if a.shape != b.shape:
        raise EmbeddingError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise EmbeddingError("cosine of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarities between ``a`` (n, d) and ``b`` (m, d)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    if np.any(na == 0) or np.any(nb == 0):
        raise EmbeddingError("cosine of a zero vector is undefined")
    return np.clip((a / na) @ (b / nb).T, -1.0, 1.0)


def angle(a, b) -> float:
    return float(np.arccos(cosine(a, b)))


def lerp(a, b, t: float) -> np.ndarray:
    if not 0.0 <= t <= 1.0:
        raise EmbeddingError(f"t={t} outside [0, 1]")
    a, b = as_vec(a), as_vec(b)
    if t == 0.0:
        return a.copy()
    if t == 1.0:
        return b.copy()
    return (1.0 - t) * a + t * b


def slerp(a, b, t: float) -> np.ndarray:
    """Constant-speed interpolation along the great circle from ``a`` to ``b``.

    Inputs are unit vectors (re-normalized with a warning otherwise). Endpoints
    are returned exactly. Antipodal pairs have no unique arc and raise.
    """
    if not 0.0 <= t <= 1.0:
        raise EmbeddingError(f"t={t} outside [0, 1]")
    a, b = ensure_unit(a), ensure_unit(b)
    if a.shape != b.shape:
        raise EmbeddingError(f"dimension mismatch: {a.shape} vs {b.shape}")
    dot = float(np.clip(a @ b, -1.0, 1.0))
    if dot <= -1.0 + ANTIPODAL_TOL:
        raise EmbeddingError("slerp between antipodal vectors is undefined")
    if t == 0.0:
        return a.copy()
    if t == 1.0:
        return b.copy()
    # Orthonormal frame {a, u}: numerically steadier than the sin-ratio form
    # at small angles.
    u = b - dot * a
    un = np.linalg.norm(u)
    if un == 0.0:
        return a.copy()
    u /= un
    theta = np.arctan2(un, dot)
    return np.cos(t * theta) * a + np.sin(t * theta) * u


def _interp(a, b, t, method):
    return slerp(a, b, t) if method == "slerp" else lerp(a, b, t)


@dataclass(frozen=True)
class InterpGrid:
    cells: np.ndarray  # (rows, cols, dim)

    @property
    def rows(self) -> int:
        return self.cells.shape[0]

    @property
    def cols(self) -> int:
        return self.cells.shape[1]

    @property
    def corners(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        c = self.cells
        return c[0, 0], c[0, -1], c[-1, 0], c[-1, -1]

    def successive_gaps(self) -> np.ndarray:
        """``1 - cos`` between every pair of horizontally or vertically adjacent cells."""
        c = self.cells
        gaps = []
        for x, y in ((c[:, :-1], c[:, 1:]), (c[:-1, :], c[1:, :])):
            x2 = x.reshape(-1, x.shape[-1])
            y2 = y.reshape(-1, y.shape[-1])
            cos = (x2 * y2).sum(1) / (np.linalg.norm(x2, axis=1) * np.linalg.norm(y2, axis=1))
            gaps.append(1.0 - cos)
        return np.concatenate(gaps)


def interp_grid(tl, tr, bl, br, rows: int, cols: int, method: str = "slerp") -> InterpGrid:
    """Interpolate four corner embeddings top-to-bottom, then left-to-right.

    Cell (i, j) is ``slerp(slerp(tl, bl, i/(rows-1)), slerp(tr, br, i/(rows-1)), j/(cols-1))``.
    """
    if rows < 2 or cols < 2:
        raise EmbeddingError(f"grid needs at least 2x2 cells, got {rows}x{cols}")
    if method not in ("slerp", "lerp"):
        raise EmbeddingError(f"unknown interpolation method {method!r}")
    tl, tr, bl, br = (as_vec(v) for v in (tl, tr, bl, br))
    if method == "slerp":
        tl, tr, bl, br = (ensure_unit(v) for v in (tl, tr, bl, br))
    cells = np.empty((rows, cols, tl.size))
    for i in range(rows):
        s = i / (rows - 1)
        left = _interp(tl, bl, s, method)
        right = _interp(tr, br, s, method)
        for j in range(cols):
            cells[i, j] = _interp(left, right, j / (cols - 1), method)
    return InterpGrid(cells)
