"""
Tensors, parameters and the compute tape.

A Tensor wraps a contiguous row-major numpy array (channels-first for
images). Primitives in ``ops`` record themselves on the innermost active
ComputeTape; ``ComputeTape.backward`` replays the records in exact reverse
order and accumulates gradients on every tensor that requires them.
"""

import logging
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from ..errors import InputError, NumericError, ShapeError

logger = logging.getLogger(__name__)

_DTYPES = {"f32": np.float32, "f64": np.float64}
_default_dtype: type = np.float32
_active_tapes: list["ComputeTape"] = []


def get_default_dtype() -> type:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    """Switch the global scalar type ("f32" for training, "f64" for gradient checks)."""
    global _default_dtype
    if isinstance(dtype, str):
        if dtype not in _DTYPES:
            raise InputError(f"unknown dtype {dtype!r}; expected one of {sorted(_DTYPES)}")
        dtype = _DTYPES[dtype]
    if np.dtype(dtype) not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise InputError(f"unsupported dtype {dtype!r}")
    _default_dtype = np.dtype(dtype).type


@contextmanager
def precision(dtype) -> Iterator[None]:
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def dtype_name(dtype) -> str:
    return "f64" if np.dtype(dtype) == np.float64 else "f32"


def check_finite(array: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(array)):
        raise NumericError(f"{op} produced non-finite values")


class Tensor:
    """Dense n-dimensional array with an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.ascontiguousarray(data, dtype=_default_dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def wrap(cls, array: np.ndarray, requires_grad: bool = False) -> "Tensor":
        """Wrap an op result without casting, so f64 inputs stay f64."""
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(array)
        t.grad = None
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={dtype_name(self.dtype)}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Named learnable tensor. ``grad`` always matches ``data`` in shape once populated."""

    __slots__ = ()

    def __init__(self, name: str, value):
        super().__init__(value.data if isinstance(value, Tensor) else value, requires_grad=True, name=name)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


@dataclass
class TapeRecord:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ComputeTape:
    """
    Ordered record of primitive ops.

    Usage:
        with ComputeTape() as tape:
            loss = some_forward(...)
        tape.backward(loss)
    """

    def __init__(self):
        self.records: list[TapeRecord] = []

    def __enter__(self) -> "ComputeTape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            logger.debug("backward called on a constant loss; nothing to do")
            return
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {id(loss): loss}
        for record in reversed(self.records):
            g = grads.pop(id(record.output), None)
            leaves.pop(id(record.output), None)
            if g is None:
                continue
            for tensor, gi in zip(record.inputs, record.backward(g)):
                if gi is None or not tensor.requires_grad:
                    continue
                check_finite(gi, f"{record.op} backward")
                key = id(tensor)
                grads[key] = grads[key] + gi if key in grads else gi
                leaves[key] = tensor
        for key, g in grads.items():
            tensor = leaves[key]
            tensor.grad = g if tensor.grad is None else tensor.grad + g


def record(op: str, inputs: Sequence[Tensor], result: np.ndarray, backward) -> Tensor:
    """Wrap an op result, check it is finite and put it on the active tape."""
    check_finite(result, op)
    out = Tensor.wrap(result, requires_grad=any(t.requires_grad for t in inputs))
    if out.requires_grad and _active_tapes:
        _active_tapes[-1].records.append(TapeRecord(op, tuple(inputs), out, backward))
    return out
