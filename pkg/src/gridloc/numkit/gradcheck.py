"""Finite-difference gradient checks for tape-recorded fragments."""

import logging
from typing import Callable, Sequence

import numpy as np

from ..errors import InputError
from .tensor import ComputeTape, Tensor

logger = logging.getLogger(__name__)


def check_gradients(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor],
                    eps: float = 1e-6, floor: float = 1e-8) -> float:
    """
    Compare tape gradients with central differences on every coordinate.

    ``loss_fn`` rebuilds the forward pass from the current values of
    ``tensors`` and returns a scalar. Returns the maximum relative error
    |a - n| / max(|a| + |n|, floor) over all coordinates.
    """
    for t in tensors:
        if t.data.dtype != np.float64:
            raise InputError(f"check_gradients needs f64 tensors; {t!r} is {t.data.dtype}")
        t.requires_grad = True
        t.grad = None

    with ComputeTape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    worst = 0.0
    for t, grad in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        for k in range(flat.size):
            original = flat[k]
            flat[k] = original + eps
            plus = loss_fn().item()
            flat[k] = original - eps
            minus = loss_fn().item()
            flat[k] = original
            numeric = (plus - minus) / (2 * eps)
            a = grad.reshape(-1)[k]
            worst = max(worst, abs(a - numeric) / max(abs(a) + abs(numeric), floor))
    logger.debug("gradient check over %d tensors: max rel error %.3g", len(tensors), worst)
    return worst
