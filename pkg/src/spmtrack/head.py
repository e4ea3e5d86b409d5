"""Prediction head and training losses.

The target state token output reweights the search tokens, the result is
laid out as a (g, g, d) feature map, and two independent 3-layer MLPs predict
a per-cell center score and a per-cell normalized (cx, cy, w, h) box.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .boxes import BBox, giou  # noqa: F401  (giou re-exported for callers of the head API)
from .tensor import Tensor

BCE_EPS = 1e-7


@dataclass
class MLP:
    weights: list[Tensor]
    biases: list[Tensor]

    def __call__(self, x: Tensor) -> Tensor:
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w + b
            if i < last:
                x = T.gelu(x)
        return x

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out


@dataclass
class HeadParams:
    cls: MLP
    reg: MLP

    def named_tensors(self) -> dict[str, Tensor]:
        out = {f"cls.{k}": v for k, v in self.cls.named_tensors().items()}
        out.update({f"reg.{k}": v for k, v in self.reg.named_tensors().items()})
        return out


def init_mlp(d: int, out: int, rng: np.random.Generator, dtype="f32", depth: int = 3, out_bias: float = 0.0) -> MLP:
    bound = 1.0 / math.sqrt(d)
    ws, bs = [], []
    for i in range(depth):
        d_out = out if i == depth - 1 else d
        ws.append(Tensor(rng.uniform(-bound, bound, (d, d_out)), requires_grad=True, dtype=dtype))
        b = np.full(d_out, out_bias) if i == depth - 1 else rng.uniform(-bound, bound, d_out)
        bs.append(Tensor(b, requires_grad=True, dtype=dtype))
    return MLP(ws, bs)


def init_head(d: int, n_cells: int, rng: np.random.Generator, dtype="f32") -> HeadParams:
    # score bias starts at the one-positive-cell prior so the initial BCE is small
    prior = 1.0 / n_cells
    return HeadParams(
        cls=init_mlp(d, 1, rng, dtype, out_bias=math.log(prior / (1 - prior))),
        reg=init_mlp(d, 4, rng, dtype),
    )


def state_weights(Hp: Tensor, Xp: Tensor) -> Tensor:
    """U = softmax(X' H'^T / sqrt(d)) * N_X, shape (..., N_X, 1); mean one over tokens."""
    n_x, d = Xp.shape[-2], Xp.shape[-1]
    logits = (Xp @ Hp.T) * (1.0 / math.sqrt(d))
    return T.softmax(logits, axis=-2) * float(n_x)


def head_forward(Hp: Tensor, Xp: Tensor, head: HeadParams) -> tuple[Tensor, Tensor]:
    """Returns (score map (..., g, g), box map (..., g, g, 4)), both sigmoid-bounded."""
    *lead, n_x, d = Xp.shape
    g = math.isqrt(n_x)
    if g * g != n_x:
        raise ValueError(f"search token count {n_x} is not a square grid")
    F = (Xp * state_weights(Hp, Xp)).reshape(*lead, g, g, d)
    score = T.sigmoid(head.cls(F)).reshape(*lead, g, g)
    boxes = T.sigmoid(head.reg(F))
    return score, boxes


# -- losses --------------------------------------------------------------------


def giou_tensor(pred: Tensor, target: Tensor, eps: float = 1e-9) -> Tensor:
    """Differentiable GIoU between (..., 4) boxes in (cx, cy, w, h) form."""
    px, py, pw, ph = T.split(pred, [1, 1, 1, 1], axis=-1)
    tx, ty, tw, th = T.split(target, [1, 1, 1, 1], axis=-1)
    p0x, p1x = px - pw * 0.5, px + pw * 0.5
    p0y, p1y = py - ph * 0.5, py + ph * 0.5
    t0x, t1x = tx - tw * 0.5, tx + tw * 0.5
    t0y, t1y = ty - th * 0.5, ty + th * 0.5
    iw = T.maximum(T.minimum(p1x, t1x) - T.maximum(p0x, t0x), 0.0)
    ih = T.maximum(T.minimum(p1y, t1y) - T.maximum(p0y, t0y), 0.0)
    inter = iw * ih
    union = pw * ph + tw * th - inter
    hull = (T.maximum(p1x, t1x) - T.minimum(p0x, t0x)) * (T.maximum(p1y, t1y) - T.minimum(p0y, t0y))
    out = inter / (union + eps) - (hull - union) / (hull + eps)
    return out.reshape(*out.shape[:-1])


def bce(score: Tensor, target: np.ndarray, eps: float = BCE_EPS) -> Tensor:
    """Mean binary cross-entropy over every cell of every map."""
    p = T.clip(score, eps, 1.0 - eps)
    t = Tensor(target, dtype=score.dtype)
    per_cell = t * T.log(p) + (1.0 - t) * T.log(1.0 - p)
    return -T.mean(per_cell)


def center_cell(gt: np.ndarray, g: int) -> tuple[np.ndarray, np.ndarray]:
    """Row/col of the cell containing each normalized (cx, cy, w, h) center."""
    gt = np.asarray(gt, dtype=float).reshape(-1, 4)
    col = np.clip(np.floor(gt[:, 0] * g), 0, g - 1).astype(int)
    row = np.clip(np.floor(gt[:, 1] * g), 0, g - 1).astype(int)
    return row, col


def target_map(gt: np.ndarray, g: int) -> np.ndarray:
    gt = np.asarray(gt, dtype=float).reshape(-1, 4)
    row, col = center_cell(gt, g)
    out = np.zeros((len(gt), g, g))
    out[np.arange(len(gt)), row, col] = 1.0
    return out


def normalize_gt(box: BBox, crop_size: float) -> np.ndarray:
    """Crop-pixel box -> clamped normalized (cx, cy, w, h)."""
    b = box.clamp(crop_size, crop_size)
    return np.array([b.cx, b.cy, b.w, b.h]) / crop_size


def tracking_loss(score: Tensor, boxes: Tensor, gt: np.ndarray) -> Tensor:
    """BCE(score, one-hot center map) + (1 - GIoU) at the ground-truth center cell.

    ``score`` is (B, g, g), ``boxes`` (B, g, g, 4), ``gt`` (B, 4) normalized
    (cx, cy, w, h) in crop coordinates. Both terms are batch means, weight 1.
    """
    if score.ndim == 2:
        score = score.reshape(1, *score.shape)
        boxes = boxes.reshape(1, *boxes.shape)
    B, g = score.shape[0], score.shape[-1]
    gt = np.asarray(gt, dtype=float).reshape(B, 4)
    row, col = center_cell(gt, g)
    cls_term = bce(score, target_map(gt, g))
    picked = boxes[np.arange(B), row, col]
    g_term = T.mean(1.0 - giou_tensor(picked, Tensor(gt, dtype=boxes.dtype)))
    return cls_term + g_term
