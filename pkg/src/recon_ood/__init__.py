"""Reconstruction-based out-of-distribution detection.

Images are embedded by a contrastively trained dual encoder, partially
noised and deterministically denoised by a feature-conditioned diffusion
model, and scored by reconstruction error against a max-error threshold
calibrated on in-distribution data.
"""

from .config import RunConfig
from .datasets import (
    DatasetManifest,
    ID_CLASSES,
    OOD_FAMILIES,
    build_dataset,
    load_dataset,
    render_class,
    render_ood,
)
from .detection import (
    DetectionReport,
    MetricsRow,
    ReconstructionOODDetector,
    ScoredSample,
    Threshold,
    build_report,
    calibrate_threshold,
    classify,
    render_text_table,
)
from .diffusion import (
    DenoiserNet,
    NoiseSchedule,
    ReconstructionConfig,
    forward_noise,
    invert_forward_noise,
    make_schedule,
    reconstruct,
    reconstruction_error,
    train_denoiser,
)
from .encoder import ContrastiveEncoder, EncoderNet, zero_shot_classify
from .metrics import auroc, fpr_at_tpr, pr_curve

__version__ = "0.1.0"

__all__ = [
    "ContrastiveEncoder",
    "DatasetManifest",
    "DenoiserNet",
    "DetectionReport",
    "EncoderNet",
    "ID_CLASSES",
    "MetricsRow",
    "NoiseSchedule",
    "OOD_FAMILIES",
    "ReconstructionConfig",
    "ReconstructionOODDetector",
    "RunConfig",
    "ScoredSample",
    "Threshold",
    "auroc",
    "build_dataset",
    "build_report",
    "calibrate_threshold",
    "classify",
    "forward_noise",
    "fpr_at_tpr",
    "invert_forward_noise",
    "load_dataset",
    "make_schedule",
    "pr_curve",
    "reconstruct",
    "reconstruction_error",
    "render_class",
    "render_ood",
    "render_text_table",
    "train_denoiser",
    "zero_shot_classify",
    "__version__",
]
