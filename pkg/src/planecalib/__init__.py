"""Targetless LiDAR-camera calibration by plane-constrained bundle adjustment."""
from .geometry import CameraIntrinsics, Se3
from .io import CalibrationDataset, load_dataset, save_dataset
from .metrics import CalibrationError, calibration_error
from .pipeline import RunReport, from_synthetic, run_pipeline

__all__ = [
    "CalibrationDataset",
    "CalibrationError",
    "CameraIntrinsics",
    "RunReport",
    "Se3",
    "calibration_error",
    "from_synthetic",
    "load_dataset",
    "run_pipeline",
    "save_dataset",
]
__version__ = "0.1.0"
