"""Tri-view guided Gaussian splatting SLAM on synthetic sequences."""

from .config import RunConfig, load_config, save_config
from .errors import ConfigError, TrackingFailure, TVGError
from .evaluation import EvalReport, ate_rmse, evaluate, rpe
from .geom import CameraIntrinsics, Pose, SimilarityTransform
from .pipeline import RunResult, open_source, read_tum, run_slam, write_dataset, write_tum
from .sim import NoiseModel, SceneSpec, make_sequence
from .splat import GaussianMap, load_ply, render, save_ply

__version__ = "0.1.0"

__all__ = [
    "RunConfig", "load_config", "save_config", "ConfigError", "TrackingFailure", "TVGError",
    "EvalReport", "ate_rmse", "evaluate", "rpe", "CameraIntrinsics", "Pose", "SimilarityTransform",
    "RunResult", "open_source", "read_tum", "run_slam", "write_dataset", "write_tum",
    "NoiseModel", "SceneSpec", "make_sequence", "GaussianMap", "load_ply", "render", "save_ply",
]
