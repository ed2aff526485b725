"""Canopy height regression with super-resolution from Sentinel-2 time series."""

from .config import RunConfig, load_config
from .datamodel import PointCloudSample, ReferenceRaster, SITSPatch, load_patch, rasterize_p95, save_patch
from .losses import LossConfig, patch_balanced_mae, total_loss, wgdl
from .metrics import EvalReport, basic_metrics, bin_errors, fap
from .model import CanopyHeightNet, ModelConfig
from .trainer import TrainConfig, Trainer, lr_schedule

__version__ = "0.1.0"

__all__ = [
    "CanopyHeightNet", "EvalReport", "LossConfig", "ModelConfig", "PointCloudSample", "ReferenceRaster",
    "RunConfig", "SITSPatch", "TrainConfig", "Trainer", "basic_metrics", "bin_errors", "fap", "load_config",
    "load_patch", "lr_schedule", "patch_balanced_mae", "rasterize_p95", "save_patch", "total_loss", "wgdl",
]
