"""Quality-driven minimal training set selection for pathology segmentation."""

from .data import SliceRecord, StackDataset, SyntheticSpec, generate_synthetic_stack, load_manifest, normalize_slice
from .errors import ConfigError, LoadError, QualsegError, ShapeError, TrainingError, ValidationError
from .evaluation import ConfusionCounts, Metrics, confusion, random_baseline, render_overlay, seg_metrics
from .model import LevelOutputs, ModelConfig, SegModel, build_model, count_params, forward, resize_outputs
from .quality import QualityScores, InitialSelection, blurriness, dedup_epsilon, psnr_inv, roi_stats, select_initial
from .selection import QualityVerdict, SelectionReport, jaccard, quality_score, select_minimal
from .training import LossHistory, TrainConfig, augment, dice_loss, gradient_check, train

__version__ = "0.1.0"

__all__ = [
    "SliceRecord", "StackDataset", "SyntheticSpec", "generate_synthetic_stack", "load_manifest", "normalize_slice",
    "QualsegError", "LoadError", "ValidationError", "ConfigError", "ShapeError", "TrainingError",
    "QualityScores", "InitialSelection", "blurriness", "psnr_inv", "roi_stats", "select_initial", "dedup_epsilon",
    "ModelConfig", "SegModel", "LevelOutputs", "build_model", "forward", "resize_outputs", "count_params",
    "TrainConfig", "LossHistory", "dice_loss", "augment", "train", "gradient_check",
    "QualityVerdict", "SelectionReport", "jaccard", "quality_score", "select_minimal",
    "ConfusionCounts", "Metrics", "confusion", "seg_metrics", "random_baseline", "render_overlay",
    "__version__",
]
