"""Axis-aligned box geometry shared by data, model and evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class BoxError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise BoxError(f"non-finite box {vals}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise BoxError(f"degenerate box {vals}: need x1 < x2 and y1 < y2")

    @classmethod
    def from_seq(cls, seq) -> "Box":
        if len(seq) != 4:
            raise BoxError(f"bbox needs 4 numbers, got {len(seq)}")
        return cls(*(float(v) for v in seq))

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def as_array(self) -> np.ndarray:
        return np.array(self.as_list(), dtype=np.float64)

    def within(self, width: float, height: float) -> bool:
        return self.x1 >= 0 and self.y1 >= 0 and self.x2 <= width and self.y2 <= height


def intersection(a: Box, b: Box) -> float:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 for disjoint boxes."""
    inter = intersection(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``[m, 4]`` and ``[n, 4]`` coordinate arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def encode_deltas(gt, proposal) -> np.ndarray:
    """(dx, dy, dw, dh) that map ``proposal`` onto ``gt``.

    Both arguments are boxes or ``[..., 4]`` coordinate arrays.
    """
    g = _coords(gt)
    p = _coords(proposal)
    pw, ph = p[..., 2] - p[..., 0], p[..., 3] - p[..., 1]
    gw, gh = g[..., 2] - g[..., 0], g[..., 3] - g[..., 1]
    dx = ((g[..., 0] + 0.5 * gw) - (p[..., 0] + 0.5 * pw)) / pw
    dy = ((g[..., 1] + 0.5 * gh) - (p[..., 1] + 0.5 * ph)) / ph
    return np.stack([dx, dy, np.log(gw / pw), np.log(gh / ph)], axis=-1)


def apply_deltas(deltas, proposal) -> np.ndarray:
    d = np.asarray(deltas, dtype=np.float64)
    p = _coords(proposal)
    pw, ph = p[..., 2] - p[..., 0], p[..., 3] - p[..., 1]
    cx = p[..., 0] + 0.5 * pw + d[..., 0] * pw
    cy = p[..., 1] + 0.5 * ph + d[..., 1] * ph
    w = pw * np.exp(np.clip(d[..., 2], -4.0, 4.0))
    h = ph * np.exp(np.clip(d[..., 3], -4.0, 4.0))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def _coords(b) -> np.ndarray:
    if isinstance(b, Box):
        return b.as_array()
    return np.asarray(b, dtype=np.float64)
