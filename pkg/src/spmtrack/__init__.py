"""Tracking transformer with TMoE parameter-efficient adapters, on a small numpy autodiff engine."""
from .boxes import BBox, giou, iou
from .config import PRESETS, ModelConfig, RunConfig, load_run_config
from .model import SPMTrack
from .tmoe import count_params, tmoe_forward
from .tracking import Tracker

__all__ = [
    "BBox",
    "giou",
    "iou",
    "PRESETS",
    "ModelConfig",
    "RunConfig",
    "load_run_config",
    "SPMTrack",
    "count_params",
    "tmoe_forward",
    "Tracker",
]
