"""Inference: crop geometry, reference-frame schedule, window penalty, box decoding."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .boxes import BBox
from .model import SPMTrack
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

IMAGE_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGE_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


def normalize_image(img: np.ndarray) -> np.ndarray:
    """8-bit RGB -> float32, scaled to [0, 1] then standardized per channel."""
    x = np.asarray(img, dtype=np.float32)
    if img.dtype == np.uint8:
        x = x / 255.0
    return (x - IMAGE_MEAN) / IMAGE_STD


@dataclass(frozen=True)
class CropTransform:
    """Frame coordinate = origin + crop coordinate * scale (per axis)."""

    x0: float
    y0: float
    scale: float
    size: int

    def to_crop(self, x: float, y: float) -> tuple[float, float]:
        return (x - self.x0) / self.scale, (y - self.y0) / self.scale

    def to_frame(self, u: float, v: float) -> tuple[float, float]:
        return self.x0 + u * self.scale, self.y0 + v * self.scale

    def box_to_crop(self, b: BBox) -> BBox:
        u, v = self.to_crop(b.x, b.y)
        return BBox(u, v, b.w / self.scale, b.h / self.scale)

    def box_to_frame(self, b: BBox) -> BBox:
        x, y = self.to_frame(b.x, b.y)
        return BBox(x, y, b.w * self.scale, b.h * self.scale)


def crop_side(bbox: BBox, factor: float) -> float:
    side = factor * math.sqrt(bbox.w * bbox.h)
    if side < 1.0:
        log.warning("degenerate box %s; crop side raised to 1 px", bbox)
        side = 1.0
    return side


def crop_and_resize(
    frame: np.ndarray, bbox: BBox, factor: float, out_size: int, center: tuple[float, float] | None = None,
    side: float | None = None,
) -> tuple[np.ndarray, CropTransform]:
    """Square crop of side factor*sqrt(w*h) around the box center, bilinearly resized.

    Area outside the frame is filled with the frame's per-channel mean.
    ``center``/``side`` override the box-derived values (used for jittered
    training crops).
    """
    if factor <= 0:
        raise ValueError(f"crop factor must be positive, got {factor}")
    cx, cy = center if center is not None else (bbox.cx, bbox.cy)
    side = side if side is not None else crop_side(bbox, factor)
    scale = side / out_size
    tf = CropTransform(cx - side / 2, cy - side / 2, scale, out_size)
    return _bilinear_sample(frame, tf), tf


def _bilinear_sample(frame: np.ndarray, tf: CropTransform) -> np.ndarray:
    H, W = frame.shape[:2]
    fill = frame.reshape(-1, frame.shape[-1]).mean(axis=0)
    coords = (np.arange(tf.size) + 0.5) * tf.scale - 0.5
    xs, ys = tf.x0 + coords, tf.y0 + coords
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    wx = (xs - x0).astype(frame.dtype)
    wy = (ys - y0).astype(frame.dtype)

    def tap(yi, xi):
        vy = (yi >= 0) & (yi < H)
        vx = (xi >= 0) & (xi < W)
        vals = frame[np.clip(yi, 0, H - 1)[:, None], np.clip(xi, 0, W - 1)[None, :]]
        valid = (vy[:, None] & vx[None, :])[..., None]
        return np.where(valid, vals, fill)

    top = tap(y0, x0) * (1 - wx)[None, :, None] + tap(y0, x0 + 1) * wx[None, :, None]
    bot = tap(y0 + 1, x0) * (1 - wx)[None, :, None] + tap(y0 + 1, x0 + 1) * wx[None, :, None]
    return (top * (1 - wy)[:, None, None] + bot * wy[:, None, None]).astype(frame.dtype)


# -- reference schedule ----------------------------------------------------------


def reference_indices(t: int, n_refs: int = 3) -> list[int]:
    """Frame indices used as references when tracking frame ``t``.

    Up to ``t <= n_refs`` every tracked frame is used, with the template (frame
    0) repeated in front to fill; afterwards the template plus frames at
    floor(k*t/n_refs), k = 1..n_refs-1.
    """
    if t < 1:
        raise ValueError(f"search frame index must be >= 1, got {t}")
    if t <= n_refs:
        tracked = list(range(1, t))
        return [0] * (n_refs - len(tracked)) + tracked
    return [0] + [k * t // n_refs for k in range(1, n_refs)]


@dataclass
class TrackerState:
    template: tuple[np.ndarray, BBox]
    history: dict[int, tuple[np.ndarray, BBox]] = field(default_factory=dict)
    carried_state: Tensor | None = None
    t: int = 1
    last_bbox: BBox | None = None
    flagged: list[int] = field(default_factory=list)
    last_state_in: np.ndarray | None = None


def select_reference_frames(t: int, state: TrackerState, n_refs: int = 3) -> list[int]:
    """Schedule indices mapped onto frames actually kept in ``state.history``."""
    out = []
    for idx in reference_indices(t, n_refs):
        if idx not in state.history:
            earlier = [k for k in state.history if k <= idx]
            sub = max(earlier) if earlier else 0
            log.warning("reference frame %d not retained; using %d", idx, sub)
            idx = sub
        out.append(idx)
    return out


def hanning_penalty(score: np.ndarray) -> np.ndarray:
    """Multiply a square response map by the outer product of symmetric Hann windows."""
    n = score.shape[-1]
    if score.shape[-2] != n:
        raise ValueError(f"response map must be square, got {score.shape}")
    # np.hanning(2) is all zeros and would erase the map, so tiny grids go unpenalized
    w = np.hanning(n) if n > 2 else np.ones(n)
    return score * np.outer(w, w)


# -- tracker ---------------------------------------------------------------------------


class Tracker:
    def __init__(self, model: SPMTrack, keep_every: int = 1):
        self.model = model
        self.cfg = model.cfg
        self.keep_every = max(1, int(keep_every))

    def init(self, frame: np.ndarray, bbox: BBox) -> TrackerState:
        img = normalize_image(frame)
        state = TrackerState(template=(img, bbox), last_bbox=bbox)
        state.history[0] = (img, bbox)
        return state

    def _ref_crop(self, img: np.ndarray, box: BBox) -> tuple[np.ndarray, BBox]:
        crop, tf = crop_and_resize(img, box, self.cfg.ref_crop_factor, self.cfg.ref_size)
        return crop, tf.box_to_crop(box)

    def track_step(self, state: TrackerState, frame: np.ndarray) -> tuple[BBox, TrackerState]:
        cfg, t = self.cfg, state.t
        img = normalize_image(frame)
        H, W = img.shape[:2]
        prev = state.last_bbox

        crops, boxes = [], []
        for idx in select_reference_frames(t, state, cfg.N):
            crop, box = self._ref_crop(*state.history[idx])
            crops.append(crop)
            boxes.append(box)
        search, tf = crop_and_resize(img, prev, cfg.search_crop_factor, cfg.search_size)

        with no_grad():
            out = self.model.forward(np.stack(crops)[None], [boxes], search[None], state.carried_state)
        state.last_state_in = self.model.state_input(state.carried_state, 1).data.copy()

        score = out.score.data[0]
        if not np.all(np.isfinite(score)) or not np.all(np.isfinite(out.boxes.data)):
            log.warning("non-finite response at frame %d; keeping previous box", t)
            state.flagged.append(t)
            bbox = prev
        else:
            row, col = np.unravel_index(np.argmax(hanning_penalty(score)), score.shape)
            cx, cy, w, h = (out.boxes.data[0, row, col] * cfg.search_size).tolist()
            bbox = tf.box_to_frame(BBox.from_center(cx, cy, w, h)).clamp(W, H)
            if bbox.w < 1 or bbox.h < 1:
                log.warning("collapsed box at frame %d; keeping previous box", t)
                state.flagged.append(t)
                bbox = prev
            state.carried_state = Tensor(out.state.data)

        if t % self.keep_every == 0:
            state.history[t] = (img, bbox)
        state.last_bbox = bbox
        state.t = t + 1
        return bbox, state

    def track(self, frames, init_bbox: BBox) -> list[BBox]:
        it = iter(frames)
        state = self.init(next(it), init_bbox)
        out = [init_bbox]
        for frame in it:
            bbox, state = self.track_step(state, frame)
            out.append(bbox)
        return out
