"""Aspect-preserving crop placement into a square encoder canvas."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .records import Box

CANVAS = 224
PAD_VALUE = 1.0  # white, in [0, 1] pixel space


class DegenerateBox(ValueError):
    pass


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class CropSpec:
    box: tuple[float, float, float, float]
    scale: float
    resized: tuple[int, int]  # (w, h)
    offset: tuple[int, int]  # (x, y) of the resized crop inside the canvas
    canvas: int = CANVAS
    pad_value: float = PAD_VALUE

    @property
    def pad_bands(self) -> tuple[int, int, int, int]:
        """White margins as (left, top, right, bottom)."""
        (w, h), (x, y) = self.resized, self.offset
        return x, y, self.canvas - w - x, self.canvas - h - y


def compute_crop(box, image_size: tuple[int, int] | None = None, target: int = CANVAS) -> CropSpec:
    """Scale the longer box side to ``target`` and center the result on a white canvas.

    ``box`` is a :class:`Box` or an ``(x0, y0, x1, y1)`` tuple in pixels.
    """
    if isinstance(box, Box):
        x0, y0, x1, y1 = box.x0, box.y0, box.x1, box.y1
    else:
        x0, y0, x1, y1 = (float(v) for v in box[:4])
    w, h = x1 - x0, y1 - y0
    if not (w > 0 and h > 0):
        raise DegenerateBox(f"box ({x0}, {y0}, {x1}, {y1}) has zero extent")
    if image_size is not None:
        iw, ih = image_size
        if not (0 <= x0 and 0 <= y0 and x1 <= iw and y1 <= ih):
            raise DegenerateBox(f"box ({x0}, {y0}, {x1}, {y1}) outside {iw}x{ih} image")
    scale = target / max(w, h)
    rw = min(target, max(1, round_half_up(w * scale)))
    rh = min(target, max(1, round_half_up(h * scale)))
    return CropSpec((x0, y0, x1, y1), scale, (rw, rh), ((target - rw) // 2, (target - rh) // 2), target)


def apply_crop(image: np.ndarray, spec: CropSpec) -> np.ndarray:
    """Nearest-neighbour render of ``spec`` from an (H, W, C) float image in [0, 1]."""
    x0, y0, x1, y1 = spec.box
    (rw, rh), (ox, oy) = spec.resized, spec.offset
    out = np.full((spec.canvas, spec.canvas) + image.shape[2:], spec.pad_value, dtype=image.dtype)
    xs = np.minimum(x0 + (np.arange(rw) + 0.5) / spec.scale, x1 - 1e-9).astype(int)
    ys = np.minimum(y0 + (np.arange(rh) + 0.5) / spec.scale, y1 - 1e-9).astype(int)
    out[oy:oy + rh, ox:ox + rw] = image[np.ix_(ys, xs)]
    return out
