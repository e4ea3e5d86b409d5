"""Axis-aligned boxes and overlap measures (plain floats, no gradients)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BBox:
    """Top-left corner plus extents, in pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ValueError(f"negative box extent: {self}")

    @property
    def cx(self) -> float:
        return self.x + self.w / 2

    @property
    def cy(self) -> float:
        return self.y + self.h / 2

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> BBox:
        w, h = max(w, 0.0), max(h, 0.0)
        return cls(cx - w / 2, cy - h / 2, w, h)

    @classmethod
    def parse(cls, text: str) -> BBox:
        parts = [float(p) for p in text.replace(" ", "").split(",")]
        if len(parts) != 4:
            raise ValueError(f"expected x,y,w,h, got {text!r}")
        return cls(*parts)

    def clamp(self, width: float, height: float) -> BBox:
        x0 = min(max(self.x, 0.0), width)
        y0 = min(max(self.y, 0.0), height)
        x1 = min(max(self.x + self.w, 0.0), width)
        y1 = min(max(self.y + self.h, 0.0), height)
        return BBox(x0, y0, x1 - x0, y1 - y0)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.as_tuple())))


def _inter_union_hull(a: BBox, b: BBox):
    iw = max(0.0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    ih = max(0.0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = iw * ih
    union = a.area + b.area - inter
    cw = max(a.x + a.w, b.x + b.w) - min(a.x, b.x)
    ch = max(a.y + a.h, b.y + b.h) - min(a.y, b.y)
    return inter, union, cw * ch


def iou(a: BBox, b: BBox) -> float:
    inter, union, _ = _inter_union_hull(a, b)
    return inter / union if union > 0 else 0.0


def giou(a: BBox, b: BBox) -> float:
    """Generalized IoU in (-1, 1]; zero-area inputs give an IoU term of 0."""
    inter, union, hull = _inter_union_hull(a, b)
    iou_term = inter / union if union > 0 else 0.0
    penalty = (hull - union) / hull if hull > 0 else 0.0
    # round-off can push identical boxes a hair above 1
    return min(iou_term - penalty, 1.0)
