"""
gridloc - grid-guided bounding box localization.

A small from-scratch detector head that places a grid of points on each
object with per-point heatmaps, fuses neighbouring point features, and
rebuilds the box from the decoded points; plus the synthetic scenes,
training loop and AP evaluation used to compare it with offset regression.
"""

__version__ = "0.1.0"

from .config import apply_thread_limit

apply_thread_limit()

from .config import RunConfig  # noqa: E402
from .gridgeom import BoxBounds, GridSpec, RoiGeometry  # noqa: E402
from .gridnet import GridDetector, load_checkpoint, save_checkpoint  # noqa: E402
from .traineval import ablation_report, evaluate_ap, infer, train  # noqa: E402

__all__ = [
    "BoxBounds",
    "GridDetector",
    "GridSpec",
    "RoiGeometry",
    "RunConfig",
    "ablation_report",
    "evaluate_ap",
    "infer",
    "load_checkpoint",
    "save_checkpoint",
    "train",
]
