"""Mixture-of-experts anomaly detection with routed subclass experts and
closed-form test-time calibration, on precomputed backbone feature maps."""
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    DatasetManifest,
    FeatureSet,
    SyntheticConfig,
    generate_synthetic_dataset,
    load_manifest,
    load_split,
    read_tensor_file,
    restructure_features,
    write_synthetic_dataset,
    write_tensor_file,
)
from .estimator import AdaptedMoE
from .evaluation import EvalReport, Variant, evaluate_bundle, run_ablation, structure_grid
from .exceptions import AdaptedMoEError
from .metrics import auroc, pixel_auroc
from .pipeline import (
    AnomalyResult,
    InferenceFlags,
    ModelBundle,
    TrainConfig,
    infer_image,
    infer_images,
    train_model,
)
from .routing import route_topk
from .tta import CalibrationStats, calibrate, fit_calibration_stats

__version__ = "0.1.0"

__all__ = [
    "AdaptedMoE", "AdaptedMoEError", "AnomalyResult", "CalibrationStats", "DatasetManifest",
    "EvalReport", "FeatureSet", "InferenceFlags", "ModelBundle", "SyntheticConfig",
    "TrainConfig", "Variant", "auroc", "calibrate", "evaluate_bundle", "fit_calibration_stats",
    "generate_synthetic_dataset", "infer_image", "infer_images", "load_checkpoint",
    "load_manifest", "load_split", "pixel_auroc", "read_tensor_file", "restructure_features",
    "route_topk", "run_ablation", "save_checkpoint", "structure_grid", "train_model",
    "write_synthetic_dataset", "write_tensor_file",
]
