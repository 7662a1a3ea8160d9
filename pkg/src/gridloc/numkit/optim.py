"""
Initialization, randomness and SGD.

All randomness uses NumPy's counter-based Philox bit generator keyed by a
64-bit seed (see ``gridloc.config.derive_seed``), so streams reproduce across
platforms and NumPy versions that keep Philox stable.
"""

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ..errors import InputError
from .tensor import Parameter, Tensor, get_default_dtype

logger = logging.getLogger(__name__)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed) & 0xFFFFFFFFFFFFFFFF))


def he_init(shape: Sequence[int], fan_in: int, seed: int) -> Tensor:
    """Normal(0, sqrt(2 / fan_in)) samples; identical for identical seeds."""
    if fan_in <= 0:
        raise InputError(f"he_init: fan_in must be positive, got {fan_in}")
    std = np.sqrt(2.0 / fan_in)
    values = make_rng(seed).standard_normal(tuple(shape)) * std
    return Tensor(values.astype(get_default_dtype()))


@dataclass
class SgdState:
    """Momentum SGD hyperparameters and one velocity buffer per parameter name."""

    lr: float
    momentum: float = 0.9
    weight_decay: float = 1e-4
    buffers: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: Iterable[Parameter], state: SgdState) -> None:
    """
    One update, in place:

        v <- momentum * v + grad + weight_decay * w
        w <- w - lr * v

    Gradients are zeroed afterwards.
    """
    for p in params:
        if p.grad is None:
            raise InputError(f"sgd_step: parameter {p.name!r} has no gradient")
        if p.grad.shape != p.data.shape:
            raise InputError(f"sgd_step: gradient of {p.name!r} has shape {p.grad.shape}, value {p.data.shape}")
        step = p.grad + state.weight_decay * p.data
        buf = state.buffers.get(p.name)
        if buf is None or buf.shape != p.data.shape:
            buf = np.zeros_like(p.data)
        buf = state.momentum * buf + step
        state.buffers[p.name] = buf.astype(p.data.dtype, copy=False)
        p.data = (p.data - state.lr * buf).astype(p.data.dtype, copy=False)
        p.zero_grad()
