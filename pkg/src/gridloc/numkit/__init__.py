"""Minimal tensor, autodiff and optimization engine."""

from .tensor import (
    ComputeTape,
    Parameter,
    Tensor,
    get_default_dtype,
    precision,
    set_default_dtype,
)
from .optim import SgdState, he_init, make_rng, sgd_step
from .gradcheck import check_gradients

__all__ = [
    "ComputeTape",
    "Parameter",
    "Tensor",
    "get_default_dtype",
    "precision",
    "set_default_dtype",
    "SgdState",
    "he_init",
    "make_rng",
    "sgd_step",
    "check_gradients",
]
