"""Training, inference, evaluation and run comparison."""

from .detect import Detection, detect_samples, infer, nms
from .evaluate import EvalResult, GroundTruth, evaluate_ap, ground_truth_from_samples
from .losses import grid_loss, regression_loss
from .report import AblationReport, ablation_report, write_html_report
from .train import TrainResult, learning_rate, train

__all__ = [
    "AblationReport",
    "Detection",
    "detect_samples",
    "EvalResult",
    "GroundTruth",
    "TrainResult",
    "ablation_report",
    "evaluate_ap",
    "grid_loss",
    "ground_truth_from_samples",
    "infer",
    "learning_rate",
    "nms",
    "regression_loss",
    "train",
    "write_html_report",
]
