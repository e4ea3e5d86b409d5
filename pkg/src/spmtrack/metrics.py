"""Per-frame overlap metrics and the box-list file format shared by track and eval."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .boxes import BBox, iou


@dataclass(frozen=True)
class TrackMetrics:
    mean_iou: float
    sr50: float
    sr75: float
    frames: int

    def format(self) -> str:
        return "\n".join([
            f"frames,{self.frames}",
            f"mean_iou,{self.mean_iou:.4f}",
            f"sr_0.50,{self.sr50:.4f}",
            f"sr_0.75,{self.sr75:.4f}",
        ])


def overlaps(pred: Sequence[BBox], gt: Sequence[BBox]) -> np.ndarray:
    if len(pred) != len(gt):
        raise ValueError(f"{len(pred)} predicted boxes vs {len(gt)} ground-truth boxes")
    return np.array([iou(p, g) for p, g in zip(pred, gt)], dtype=float)


def evaluate(pred: Sequence[BBox], gt: Sequence[BBox]) -> TrackMetrics:
    """Mean IoU and success rates (fraction of frames with IoU above 0.5 / 0.75)."""
    o = overlaps(pred, gt)
    if o.size == 0:
        return TrackMetrics(0.0, 0.0, 0.0, 0)
    return TrackMetrics(float(o.mean()), float((o > 0.5).mean()), float((o > 0.75).mean()), int(o.size))


def format_box_line(idx: int, b: BBox) -> str:
    return f"{idx},{b.x:.2f},{b.y:.2f},{b.w:.2f},{b.h:.2f}"


def read_box_file(path: str | Path) -> list[BBox]:
    """Lines of ``frame_idx,x,y,w,h`` or ``x,y,w,h``; blank lines and ``#`` comments skipped."""
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split(",")
        if len(fields) == 5:
            fields = fields[1:]
        try:
            out.append(BBox.parse(",".join(fields)))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return out
