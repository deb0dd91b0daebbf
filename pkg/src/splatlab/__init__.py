"""Tile-based Gaussian splatting with configurable adaptive density control."""

from .adc import AdcConfig, baseline_config, ours_config, pixelgs_config
from .core import FLAT2D, PERSPECTIVE3D, ContractViolation, SceneModel
from .gradients import backward, finite_difference_check
from .metrics import MetricReport, psnr, ssim
from .projection import Camera, cull_and_project
from .raster import render, render_reference
from .scene_io import Dataset, load_dataset, save_dataset, synthetic_scene
from .trainer import TrainConfig, evaluate, train

__all__ = [
    "AdcConfig", "baseline_config", "ours_config", "pixelgs_config",
    "FLAT2D", "PERSPECTIVE3D", "ContractViolation", "SceneModel",
    "backward", "finite_difference_check", "MetricReport", "psnr", "ssim",
    "Camera", "cull_and_project", "render", "render_reference",
    "Dataset", "load_dataset", "save_dataset", "synthetic_scene",
    "TrainConfig", "evaluate", "train",
]
