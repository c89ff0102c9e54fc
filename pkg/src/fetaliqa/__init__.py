"""Semi-supervised slice-level MR image quality assessment.

A small, self-contained numpy/scipy implementation of mean-teacher training
with brain-ROI consistency for classifying MR slices as diagnostic,
non-diagnostic, or missing the brain, plus a synthetic artifact dataset
generator, evaluation utilities, and an online-reacquisition simulator.
"""

__version__ = "0.1.0"

from .data import Dataset, Label, Slice, load_manifest, save_manifest
from .evaluation import EvalReport, accuracy, auc_n, evaluate_model
from .losses import LossBreakdown, LossWeights, composite_loss, ramp_up
from .roi import ROICircle, RoiConfig, aggregate_stack_roi, rasterize_circle
from .synth import SynthConfig, generate_synthetic
from .trainer import PerturbConfig, TrainConfig, train

__all__ = [
    "Dataset",
    "Label",
    "Slice",
    "load_manifest",
    "save_manifest",
    "EvalReport",
    "accuracy",
    "auc_n",
    "evaluate_model",
    "LossBreakdown",
    "LossWeights",
    "composite_loss",
    "ramp_up",
    "ROICircle",
    "RoiConfig",
    "aggregate_stack_roi",
    "rasterize_circle",
    "SynthConfig",
    "generate_synthetic",
    "PerturbConfig",
    "TrainConfig",
    "train",
    "__version__",
]
