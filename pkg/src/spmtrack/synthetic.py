"""Seeded synthetic videos: one moving target over a noisy background."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import BBox
from .config import SceneConfig


@dataclass(frozen=True)
class SyntheticSceneSpec:
    canvas: int = 128
    length: int = 60
    shape: str = "rectangle"  # or "ellipse"
    color: tuple[float, float, float] = (0.9, 0.2, 0.2)
    init_box: tuple[float, float, float, float] = (40.0, 40.0, 20.0, 16.0)
    velocity: tuple[float, float] = (1.5, 0.5)
    scale_drift: float = 0.0  # relative size change per frame
    noise: float = 0.05
    background: tuple[float, float, float] = (0.35, 0.4, 0.45)
    distractors: int = 0
    seed: int = 0

    def __post_init__(self):
        x, y, w, h = self.init_box
        if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > self.canvas or y + h > self.canvas:
            raise ValueError(f"target {self.init_box} not fully inside {self.canvas}px canvas")
        if self.shape not in ("rectangle", "ellipse"):
            raise ValueError(f"unknown shape {self.shape!r}")


def _coverage_rect(n: int, x: float, y: float, w: float, h: float) -> np.ndarray:
    """Exact per-pixel area coverage of an axis-aligned rectangle."""
    edges = np.arange(n, dtype=float)
    cov_x = np.clip(np.minimum(edges + 1, x + w) - np.maximum(edges, x), 0, 1)
    cov_y = np.clip(np.minimum(edges + 1, y + h) - np.maximum(edges, y), 0, 1)
    return cov_y[:, None] * cov_x[None, :]


def _coverage_ellipse(n: int, x: float, y: float, w: float, h: float) -> np.ndarray:
    c = np.arange(n) + 0.5
    dx = (c[None, :] - (x + w / 2)) / (w / 2)
    dy = (c[:, None] - (y + h / 2)) / (h / 2)
    r = np.sqrt(dx**2 + dy**2)
    # approximate one-pixel soft edge
    edge = 0.5 * (w + h) / 2
    return np.clip((1.0 - r) * edge + 0.5, 0.0, 1.0)


def _trajectory(canvas, box, velocity, drift, length):
    x, y, w, h = box
    vx, vy = velocity
    w0, h0 = w, h
    out = []
    for _ in range(length):
        out.append(BBox(x, y, w, h))
        if drift:
            s = 1.0 + drift
            nw = min(max(w * s, 0.5 * w0), 2.0 * w0, canvas * 0.9)
            nh = min(max(h * s, 0.5 * h0), 2.0 * h0, canvas * 0.9)
            x, y = x - (nw - w) / 2, y - (nh - h) / 2
            w, h = nw, nh
        x, y = x + vx, y + vy
        if x < 0:
            x, vx = -x, -vx
        elif x + w > canvas:
            x, vx = 2 * (canvas - w) - x, -vx
        if y < 0:
            y, vy = -y, -vy
        elif y + h > canvas:
            y, vy = 2 * (canvas - h) - y, -vy
        x = min(max(x, 0.0), canvas - w)
        y = min(max(y, 0.0), canvas - h)
    return out


def generate_synthetic_video(spec: SyntheticSceneSpec) -> tuple[np.ndarray, list[BBox]]:
    """Frames (T, canvas, canvas, 3) uint8 and the tight target box per frame."""
    rng = np.random.default_rng(spec.seed)
    n = spec.canvas
    boxes = _trajectory(n, spec.init_box, spec.velocity, spec.scale_drift, spec.length)

    # static low-frequency background: base color plus a random linear gradient
    ramp = np.linspace(-1.0, 1.0, n)
    gx, gy = rng.uniform(-0.12, 0.12, size=(2, 3))
    base = np.asarray(spec.background)[None, None, :] + ramp[None, :, None] * gx + ramp[:, None, None] * gy

    distractors = []
    for _ in range(spec.distractors):
        w, h = rng.uniform(8, 20, size=2)
        box = (rng.uniform(0, n - w), rng.uniform(0, n - h), w, h)
        color = rng.uniform(0.0, 1.0, size=3)
        vel = tuple(rng.uniform(-2, 2, size=2))
        distractors.append((_trajectory(n, box, vel, 0.0, spec.length), color))

    draw = _coverage_ellipse if spec.shape == "ellipse" else _coverage_rect
    color = np.asarray(spec.color)
    frames = np.empty((spec.length, n, n, 3), dtype=np.uint8)
    for t, b in enumerate(boxes):
        img = base + rng.normal(0.0, spec.noise, size=(n, n, 3))
        for traj, dcolor in distractors:
            d = traj[t]
            a = _coverage_rect(n, d.x, d.y, d.w, d.h)[..., None]
            img = img * (1 - a) + dcolor * a
        a = draw(n, b.x, b.y, b.w, b.h)[..., None]
        # mild two-tone shading so the target has internal structure
        shade = color * (0.85 + 0.15 * np.sign(np.arange(n) - (b.y + b.h / 2)))[:, None, None]
        img = img * (1 - a) + shade * a
        frames[t] = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    return frames, boxes


def random_scene(scene: SceneConfig, seed: int, length: int | None = None) -> SyntheticSceneSpec:
    """Draw a scene spec from the ranges in ``scene``; deterministic per seed."""
    rng = np.random.default_rng([seed, 7919])
    n = scene.canvas
    size = rng.uniform(*scene.size_range)
    aspect = np.exp(rng.uniform(-0.35, 0.35))
    w, h = size * np.sqrt(aspect), size / np.sqrt(aspect)
    x, y = rng.uniform(0, n - w), rng.uniform(0, n - h)
    speed = rng.uniform(*scene.speed_range)
    angle = rng.uniform(0, 2 * np.pi)
    background = rng.uniform(0.2, 0.8, size=3)
    while True:
        color = rng.uniform(0.0, 1.0, size=3)
        if np.abs(color - background).sum() > 0.6:
            break
    drift = rng.uniform(-scene.scale_drift, scene.scale_drift) if scene.scale_drift else 0.0
    return SyntheticSceneSpec(
        canvas=n,
        length=length or scene.length,
        shape="ellipse" if rng.random() < 0.5 else "rectangle",
        color=tuple(color.tolist()),
        init_box=(float(x), float(y), float(w), float(h)),
        velocity=(float(speed * np.cos(angle)), float(speed * np.sin(angle))),
        scale_drift=float(drift),
        noise=scene.noise,
        background=tuple(background.tolist()),
        distractors=scene.distractors,
        seed=int(seed),
    )
