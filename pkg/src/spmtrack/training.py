"""Parameter-efficient training on synthetic sequences."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .boxes import BBox
from .config import ModelConfig, RunConfig, TrainConfig
from .head import normalize_gt, tracking_loss
from .model import SPMTrack
from .synthetic import generate_synthetic_video, random_scene
from .tensor import Tensor
from .tracking import crop_and_resize, crop_side, normalize_image

log = logging.getLogger(__name__)


# -- schedule and optimizer -------------------------------------------------------


def lr_schedule(step: int, total_steps: int, warmup_steps: int,
                peak: float = 1e-4, start: float = 1e-7, end: float = 1e-6) -> float:
    """Linear warmup start -> peak, then cosine decay peak -> end at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps > 0 and step <= warmup_steps:
        return start + (peak - start) * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return peak
    frac = (step - warmup_steps) / span
    return end + 0.5 * (peak - end) * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptimState:
    """Decoupled-weight-decay Adam moments for the trainable tensors only."""

    base_lr: float = 1e-4
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_update(params: dict[str, Tensor], opt: OptimState, lr: float) -> None:
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1**opt.step
    c2 = 1.0 - b2**opt.step
    for name, p in params.items():
        if not p.requires_grad:
            raise ValueError(f"{name} is frozen and must not be optimized")
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = opt.m.get(name)
        if m is None:
            m = opt.m[name] = np.zeros_like(p.data)
            opt.v[name] = np.zeros_like(p.data)
        v = opt.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        new = p.data * (1.0 - lr * opt.weight_decay)
        new = new - lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
        p.data = new.astype(p.dtype, copy=False)


# -- sampling ------------------------------------------------------------------------


@dataclass
class TrainSample:
    frames: list[np.ndarray]
    bboxes: list[BBox]
    indices: list[int]
    reversed: bool = False

    @property
    def refs(self):
        return self.frames[:3], self.bboxes[:3]

    @property
    def searches(self):
        return self.frames[3:], self.bboxes[3:]


def sample_frame_indices(length: int, rng: np.random.Generator, max_gap: int = 200,
                         n: int = 5) -> tuple[list[int], list[int], bool]:
    """Pick ``n`` frame indices with i.i.d. gaps in [1, max_gap], maybe reversed.

    Returns (indices, drawn_gaps, reversed). Gaps are shrunk to fit the video;
    videos shorter than ``n`` repeat their last frame.
    """
    if length < 1:
        raise ValueError("empty video")
    gaps = rng.integers(1, max_gap + 1, size=n - 1)
    flip = bool(rng.random() < 0.5)
    if length < n:
        idx = list(range(length)) + [length - 1] * (n - length)
    else:
        fit = gaps.copy()
        room = length - 1
        if fit.sum() > room:
            fit = np.maximum(1, np.floor(fit * room / fit.sum())).astype(int)
            while fit.sum() > room:
                fit[np.argmax(fit)] -= 1
        start = int(rng.integers(0, room - fit.sum() + 1))
        idx = (start + np.concatenate([[0], np.cumsum(fit)])).tolist()
    if flip:
        idx = idx[::-1]
    return [int(i) for i in idx], gaps.tolist(), flip


def sample_sequence(video: tuple[np.ndarray, Sequence[BBox]], rng: np.random.Generator,
                    max_gap: int = 200) -> TrainSample:
    frames, boxes = video
    idx, _, flip = sample_frame_indices(len(frames), rng, max_gap)
    return TrainSample([frames[i] for i in idx], [boxes[i] for i in idx], idx, flip)


@dataclass
class Batch:
    refs: np.ndarray  # (B, N, S_ref, S_ref, 3)
    ref_boxes: list[list[BBox]]
    search: list[np.ndarray]  # two arrays (B, S, S, 3)
    gt: list[np.ndarray]  # two arrays (B, 4) normalized cx, cy, w, h


def jittered_search_crop(frame, box: BBox, cfg: ModelConfig, rng, center_jitter, scale_jitter):
    side = crop_side(box, cfg.search_crop_factor) * math.exp(rng.normal() * scale_jitter)
    base = math.sqrt(max(box.w * box.h, 1.0))
    cx = box.cx + base * center_jitter * (rng.random() - 0.5)
    cy = box.cy + base * center_jitter * (rng.random() - 0.5)
    crop, tf = crop_and_resize(frame, box, cfg.search_crop_factor, cfg.search_size, center=(cx, cy), side=side)
    return crop, normalize_gt(tf.box_to_crop(box), cfg.search_size)


def make_batch(samples: Sequence[TrainSample], cfg: ModelConfig, tcfg: TrainConfig,
               rng: np.random.Generator) -> Batch:
    refs, ref_boxes = [], []
    search = [[], []]
    gt = [[], []]
    for s in samples:
        crops, boxes = [], []
        frames, bbs = s.refs
        for f, b in zip(frames, bbs):
            crop, tf = crop_and_resize(normalize_image(f), b, cfg.ref_crop_factor, cfg.ref_size)
            crops.append(crop)
            boxes.append(tf.box_to_crop(b).clamp(cfg.ref_size, cfg.ref_size))
        refs.append(np.stack(crops))
        ref_boxes.append(boxes)
        for j, (f, b) in enumerate(zip(*s.searches)):
            crop, g = jittered_search_crop(normalize_image(f), b, cfg, rng, tcfg.center_jitter, tcfg.scale_jitter)
            search[j].append(crop)
            gt[j].append(g)
    return Batch(np.stack(refs), ref_boxes, [np.stack(x) for x in search], [np.stack(x) for x in gt])


# -- steps -------------------------------------------------------------------------------


def batch_loss(model: SPMTrack, batch: Batch) -> Tensor:
    """Two search frames; the second sees H + H' of the first. Mean of both losses."""
    out1 = model.forward(batch.refs, batch.ref_boxes, batch.search[0])
    loss1 = tracking_loss(out1.score, out1.boxes, batch.gt[0])
    out2 = model.forward(batch.refs, batch.ref_boxes, batch.search[1], carried=out1.state)
    loss2 = tracking_loss(out2.score, out2.boxes, batch.gt[1])
    return (loss1 + loss2) * 0.5


def train_step(model: SPMTrack, batch: Batch, opt: OptimState, lr: float | None = None) -> float:
    """One optimizer step; a non-finite loss skips the update and returns nan."""
    params = model.trainable_params()
    model.zero_grad()
    try:
        loss = batch_loss(model, batch)
    except FloatingPointError as exc:
        log.warning("non-finite activations at optimizer step %d (%s); update skipped", opt.step, exc)
        return float("nan")
    value = loss.item()
    if not math.isfinite(value):
        log.warning("non-finite loss at optimizer step %d; update skipped", opt.step)
        return float("nan")
    loss.backward()
    if not all(np.all(np.isfinite(p.grad)) for p in params.values() if p.grad is not None):
        log.warning("non-finite gradient at optimizer step %d; update skipped", opt.step)
        model.zero_grad()
        return float("nan")
    adamw_update(params, opt, opt.base_lr if lr is None else lr)
    model.zero_grad()
    return value


def make_videos(run: RunConfig) -> list[tuple[np.ndarray, list[BBox]]]:
    return [generate_synthetic_video(random_scene(run.scene, seed=run.seed * 100_003 + i))
            for i in range(run.train.n_videos)]


class NonFiniteTraining(RuntimeError):
    """Raised after too many consecutive non-finite steps.

    The model has been rolled back to the last parameters that produced a
    finite loss; ``step`` is the optimizer step at which training stopped.
    """

    def __init__(self, msg: str, step: int):
        super().__init__(msg)
        self.step = step


def train(run: RunConfig, steps: int | None = None,
          on_step: Callable[[int, float, float], None] | None = None,
          model: SPMTrack | None = None, max_skips: int = 20) -> tuple[SPMTrack, list[float]]:
    """Train from the run config; ``on_step(step, loss, lr)`` is called after every step."""
    tcfg = run.train
    total = tcfg.steps if steps is None else steps
    model = model or SPMTrack(run.model, run.variant, seed=run.seed)
    videos = make_videos(run) if total > 0 else []
    rng = np.random.default_rng([run.seed, 1])
    opt = OptimState(base_lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    losses: list[float] = []
    params = model.trainable_params()
    last_good = {k: t.data for k, t in params.items()}
    skips = 0
    while opt.step < total:
        step = opt.step
        lr = lr_schedule(step, total, min(tcfg.warmup_steps, total), tcfg.lr, tcfg.lr_start, tcfg.lr_end)
        picks = rng.integers(0, len(videos), size=tcfg.batch)
        samples = [sample_sequence(videos[i], rng, tcfg.max_gap) for i in picks]
        batch = make_batch(samples, run.model, tcfg, rng)
        before = {k: t.data for k, t in params.items()}  # updates rebind .data, so no copy needed
        value = train_step(model, batch, opt, lr)
        if not math.isfinite(value):
            skips += 1
            if skips > max_skips:
                for k, t in params.items():
                    t.data = last_good[k]
                raise NonFiniteTraining(f"{skips} consecutive non-finite steps at step {step}", step)
            continue
        skips = 0
        last_good = before
        losses.append(value)
        if on_step is not None:
            on_step(step, value, lr)
    return model, losses
