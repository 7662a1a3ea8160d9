"""
Grid-point feature fusion.

Every grid point i collects features from its source points S_i, the points
at unit L1 grid distance. Each ordered pair (j -> i) owns a stack of three
5x5 convs (ReLU between, none after the last) that transfers F_j into the
feature space of point i; transferred maps are summed onto F_i. Running the
same wiring a second time with an independent bank extends each point's
reach to L1 distance 2.
"""

import logging
from dataclasses import dataclass
from typing import Sequence

from .errors import InputError, ShapeError
from .gridgeom import GridSpec
from .numkit import ops
from .numkit.layers import Conv2d, Layer
from .numkit.tensor import Tensor

logger = logging.getLogger(__name__)

TRANSFER_KERNEL = 5
TRANSFER_DEPTH = 3


@dataclass(frozen=True)
class FusionTopology:
    """``sources[i]`` is S_i, ascending."""

    points: tuple[tuple[int, int], ...]
    sources: tuple[tuple[int, ...], ...]

    @classmethod
    def from_points(cls, points: Sequence[tuple[int, int]]) -> "FusionTopology":
        points = tuple((int(r), int(c)) for r, c in points)
        sources = tuple(
            tuple(j for j, (rj, cj) in enumerate(points) if abs(ri - rj) + abs(ci - cj) == 1)
            for ri, ci in points
        )
        return cls(points, sources)

    @classmethod
    def from_spec(cls, spec: GridSpec) -> "FusionTopology":
        return cls.from_points(spec.points)

    @property
    def pairs(self) -> list[tuple[int, int]]:
        """Ordered (source, destination) pairs."""
        return [(j, i) for i, src in enumerate(self.sources) for j in src]

    @property
    def is_inert(self) -> bool:
        return not any(self.sources)


def source_points(i: int, spec: GridSpec) -> tuple[int, ...]:
    if not 0 <= i < spec.n_points:
        raise InputError(f"grid point index {i} outside 0..{spec.n_points - 1}")
    return FusionTopology.from_spec(spec).sources[i]


class TransferStack(Layer):
    def __init__(self, name: str, channels: int, seed: int):
        pad = TRANSFER_KERNEL // 2
        self.convs = [
            Conv2d(f"{name}.conv{k}", channels, channels, TRANSFER_KERNEL, seed, padding=pad)
            for k in range(TRANSFER_DEPTH)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for k, conv in enumerate(self.convs):
            x = conv(x)
            if k < len(self.convs) - 1:
                x = ops.relu(x)
        return x


class TransferBank(Layer):
    """
    One transfer stack per ordered pair of a topology.

    Parameter names: ``{prefix}.j{src}_to_i{dst}.conv{0..2}.{weight,bias}``.
    """

    def __init__(self, prefix: str, topology: FusionTopology, channels: int, seed: int):
        self.prefix = prefix
        self.topology = topology
        self.stacks = {
            (j, i): TransferStack(f"{prefix}.j{j}_to_i{i}", channels, seed)
            for j, i in topology.pairs
        }

    def transfer(self, j: int, i: int, x: Tensor) -> Tensor:
        return self.stacks[(j, i)](x)


def _fuse(features: Sequence[Tensor], topology: FusionTopology, bank: TransferBank) -> list[Tensor]:
    if len(features) != len(topology.points):
        raise ShapeError(f"fusion: got {len(features)} feature maps for {len(topology.points)} grid points")
    reference = features[0].shape
    for idx, f in enumerate(features):
        if f.shape != reference:
            dim = next((d for d, (a, b) in enumerate(zip(f.shape, reference)) if a != b), len(reference))
            raise ShapeError(f"fusion: feature map {idx} has shape {f.shape}, expected {reference} (dim {dim})")
    fused = []
    for i, src in enumerate(topology.sources):
        if not src:
            fused.append(features[i])
            continue
        fused.append(ops.add(features[i], *(bank.transfer(j, i, features[j]) for j in src)))
    return fused


def fuse_first_order(features: Sequence[Tensor], topology: FusionTopology, bank: TransferBank) -> list[Tensor]:
    """F'_i = F_i + sum over j in S_i of T_{j->i}(F_j). Maps are (R, C, H, W)."""
    return _fuse(features, topology, bank)


def fuse_second_order(first_order: Sequence[Tensor], topology: FusionTopology, bank: TransferBank) -> list[Tensor]:
    """F''_i = F'_i + sum over j in S_i of T+_{j->i}(F'_j), with a bank independent of the first order."""
    return _fuse(first_order, topology, bank)
