"""Grid and regression losses."""

import logging

import numpy as np

from ..errors import ShapeError
from ..numkit import ops
from ..numkit.tensor import Tensor

logger = logging.getLogger(__name__)


def _point_weights(valid: np.ndarray, pixels: int) -> tuple[np.ndarray, int]:
    """
    Per-(RoI, point) weights that average over valid points, then over RoIs
    that have at least one valid point.
    """
    valid = np.asarray(valid, dtype=bool)
    per_roi = valid.sum(axis=1)
    used = per_roi > 0
    skipped = int((~used).sum())
    weights = np.zeros(valid.shape, dtype=np.float64)
    if used.any():
        weights[used] = valid[used] / per_roi[used, None]
        weights /= used.sum() * pixels
    return weights, skipped


def grid_loss(final_logits: Tensor, intermediate_logits: Tensor, final_targets, intermediate_targets,
              valid, lambda_int: float = 1.0) -> tuple[Tensor, int]:
    """
    BCE over final heatmaps plus ``lambda_int`` x BCE over intermediate maps.

    Targets have the logits' shapes, (R, n, H, W); ``valid`` is (R, n).
    Each term is the per-pixel mean over a valid map, averaged over the RoI's
    valid points and then over RoIs. RoIs without any valid point contribute
    nothing and are counted in the returned ``skipped``; if no RoI has one, the
    loss is exactly zero.
    """
    r, n = final_logits.shape[:2]
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != (r, n):
        raise ShapeError(f"grid_loss: validity shape {valid.shape} != logits (R, n) {(r, n)}")
    if intermediate_logits.shape[:2] != (r, n):
        raise ShapeError(f"grid_loss: intermediate logits {intermediate_logits.shape} vs final {final_logits.shape}")

    w_final, skipped = _point_weights(valid, final_logits.shape[2] * final_logits.shape[3])
    if skipped:
        logger.debug("grid_loss: %d of %d RoIs have no valid grid point", skipped, r)
    if skipped == r:
        return ops.constant(0.0, final_logits), skipped
    w_inter, _ = _point_weights(valid, intermediate_logits.shape[2] * intermediate_logits.shape[3])

    final = ops.weighted_sigmoid_bce(final_logits, final_targets, w_final[:, :, None, None])
    inter = ops.weighted_sigmoid_bce(intermediate_logits, intermediate_targets, w_inter[:, :, None, None])
    return ops.add(final, ops.scale(inter, lambda_int)), skipped


def regression_loss(pred: Tensor, targets) -> Tensor:
    """Smooth-L1 (transition at 1) summed over the four offsets, mean over RoIs."""
    targets = np.asarray(targets)
    if pred.ndim != 2 or pred.shape[1] != 4:
        raise ShapeError(f"regression_loss: predictions must be (R, 4), got {pred.shape}")
    return ops.smooth_l1(pred, targets, beta=1.0)
