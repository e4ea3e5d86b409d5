"""Configuration dataclasses and the YAML run-config loader."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

VARIANTS = ("tmoe", "per_expert_compression", "conventional_moe", "lora_baseline")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    L: int = 2
    d: int = 64
    N_h: int = 4
    M: int = 8
    r: int = 8
    N_e: int = 2
    ref_size: int = 32
    search_size: int = 64
    ref_crop_factor: float = 2.0
    search_crop_factor: float = 5.0
    N: int = 3
    mlp_ratio: int = 4
    # patch projection comes from a pretrained backbone and stays frozen
    pretrained_backbone: bool = False
    dtype: str = "f32"

    def __post_init__(self):
        if self.d % self.N_h:
            raise ConfigError(f"d={self.d} not divisible by N_h={self.N_h}")
        for name in ("ref_size", "search_size"):
            if getattr(self, name) % self.M:
                raise ConfigError(f"{name}={getattr(self, name)} not divisible by patch size M={self.M}")
        if self.L < 0 or self.N_e < 1 or self.r < 1 or self.N < 1:
            raise ConfigError("L >= 0, N_e >= 1, r >= 1 and N >= 1 required")
        if self.r > self.d:
            raise ConfigError(f"compression dim r={self.r} exceeds d={self.d}")
        if self.dtype not in ("f32", "f64"):
            raise ConfigError(f"dtype must be f32 or f64, got {self.dtype!r}")

    @property
    def ref_grid(self) -> int:
        return self.ref_size // self.M

    @property
    def search_grid(self) -> int:
        return self.search_size // self.M

    @property
    def N_T(self) -> int:
        return self.ref_grid**2

    @property
    def N_X(self) -> int:
        return self.search_grid**2

    @property
    def seq_len(self) -> int:
        return 1 + self.N * self.N_T + self.N_X

    @property
    def hidden(self) -> int:
        return self.mlp_ratio * self.d


_LARGE_COMMON = dict(M=14, r=64, N_e=4, ref_size=196, search_size=378, N=3, pretrained_backbone=True)

PRESETS: dict[str, ModelConfig] = {
    "spmtrack-b": ModelConfig(L=12, d=768, N_h=12, **_LARGE_COMMON),
    "spmtrack-l": ModelConfig(L=24, d=1024, N_h=16, **_LARGE_COMMON),
    "spmtrack-g": ModelConfig(L=40, d=1536, N_h=24, **_LARGE_COMMON),
    "desk": ModelConfig(),
    "tiny": ModelConfig(L=2, d=8, N_h=2, M=2, r=2, N_e=2, ref_size=4, search_size=4),
}


@dataclass(frozen=True)
class SceneConfig:
    """Ranges from which synthetic training/eval scenes are drawn."""

    canvas: int = 128
    length: int = 100
    size_range: tuple[float, float] = (14.0, 26.0)
    speed_range: tuple[float, float] = (0.5, 2.5)
    scale_drift: float = 0.0
    noise: float = 0.06
    distractors: int = 0


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch: int = 8
    lr: float = 1e-4
    lr_start: float = 1e-7
    lr_end: float = 1e-6
    warmup_steps: int = 100
    weight_decay: float = 0.1
    max_gap: int = 200
    center_jitter: float = 3.0
    scale_jitter: float = 0.25
    n_videos: int = 64
    log_every: int = 1


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    variant: str = "tmoe"
    train: TrainConfig = field(default_factory=TrainConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")


def _build(cls, raw, where: str, base=None):
    base = base if base is not None else cls()
    if raw is None:
        return base
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for key, value in raw.items():
        if isinstance(getattr(base, key), tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return dataclasses.replace(base, **kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def run_config_from_dict(raw: dict, use_env: bool = True) -> RunConfig:
    """Build a validated RunConfig; ``preset`` names a base model config.

    With ``use_env`` the SPM_SEED environment variable overrides ``seed``.
    """
    raw = dict(raw or {})
    unknown = sorted(set(raw) - {f.name for f in dataclasses.fields(RunConfig)} - {"preset"})
    if unknown:
        raise ConfigError(f"config: unknown keys {unknown}")
    preset = raw.get("preset")
    base = None
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
        base = PRESETS[preset]
    cfg = RunConfig(
        model=_build(ModelConfig, raw.get("model"), "model", base),
        variant=raw.get("variant", "tmoe"),
        train=_build(TrainConfig, raw.get("train"), "train"),
        scene=_build(SceneConfig, raw.get("scene"), "scene"),
        seed=int(raw.get("seed", 0)),
    )
    env_seed = os.environ.get("SPM_SEED") if use_env else None
    if env_seed is not None:
        cfg = dataclasses.replace(cfg, seed=int(env_seed))
    return cfg


def load_run_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"config {path}: top level must be a mapping")
    return run_config_from_dict(raw or {})


def run_config_to_dict(cfg: RunConfig) -> dict:
    out = dataclasses.asdict(cfg)
    out["scene"]["size_range"] = list(cfg.scene.size_range)
    out["scene"]["speed_range"] = list(cfg.scene.speed_range)
    return out
