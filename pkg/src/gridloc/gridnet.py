"""
Model assembly: toy backbone, RoI extraction, grid head and regression head.

Checkpoint naming:
    backbone.conv{1..4}.{weight,bias}
    grid_head.trunk.conv{1..8}.*, grid_head.groups.*, grid_head.inter_heads.*,
    grid_head.fusion.o{1,2}.j{src}_to_i{dst}.conv{0..2}.*,
    grid_head.deconv{1,2}.*, grid_head.final_heads.*
    reg_head.fc6.*, reg_head.fc7.*, reg_head.pred.*
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import HEADS, ModelConfig
from .errors import BlobFormatError, ConfigError, InputError, ShapeError
from .fusion import FusionTopology, TransferBank, fuse_first_order, fuse_second_order
from .gridgeom import BoxBounds, GridSpec, RoiGeometry, enlarge_roi
from .numkit import ops
from .numkit.blob import load_blob, save_blob
from .numkit.layers import Conv2d, ConvTranspose2d, GroupedHeads, Layer, Linear
from .numkit.tensor import Parameter, Tensor

logger = logging.getLogger(__name__)

FEATURE_STRIDE = 4
DECONV_KERNEL = 4
MAX_LOG_SCALE = 4.0
PRED_INIT_STD = 0.001


# =============================================================================
# BACKBONE
# =============================================================================

class Backbone(Layer):
    """Four 3x3 conv+ReLU layers, two of them stride 2: features at stride 4."""

    def __init__(self, channels: int, seed: int):
        half = max(channels // 2, 1)
        self.convs = [
            Conv2d("backbone.conv1", 1, half, 3, seed, stride=1, padding=1),
            Conv2d("backbone.conv2", half, channels, 3, seed, stride=2, padding=1),
            Conv2d("backbone.conv3", channels, channels, 3, seed, stride=1, padding=1),
            Conv2d("backbone.conv4", channels, channels, 3, seed, stride=2, padding=1),
        ]

    def __call__(self, images: Tensor) -> Tensor:
        if images.ndim != 4 or images.shape[1] != 1:
            raise ShapeError(f"backbone expects (N, 1, H, W) images, got {images.shape}")
        for dim in (2, 3):
            if images.shape[dim] % FEATURE_STRIDE:
                raise ShapeError(f"backbone: image dim {dim} ({images.shape[dim]}) is not a multiple of {FEATURE_STRIDE}")
        x = images
        for conv in self.convs:
            x = ops.relu(conv(x))
        return x


# =============================================================================
# GRID HEAD
# =============================================================================

@dataclass
class GridOutputs:
    """Logits: intermediate (R, n, roi, roi) read from F_i, final (R, n, heatmap, heatmap)."""

    intermediate: Tensor
    final: Tensor


def _prior_bias(prior: float) -> float:
    return -math.log((1.0 - prior) / prior)


class GridHead(Layer):
    def __init__(self, config: ModelConfig, seed: int):
        self.config = config
        self.spec = GridSpec.from_name(config.grid)
        self.topology = FusionTopology.from_spec(self.spec)
        n, cpp, t = self.spec.n_points, config.channels_per_point, config.trunk_channels
        k, d, pad = config.trunk_kernel, config.trunk_dilation, config.trunk_padding
        self.trunk = [
            Conv2d(f"grid_head.trunk.conv{i + 1}", config.backbone_channels if i == 0 else t, t, k, seed,
                   padding=pad, dilation=d)
            for i in range(config.trunk_convs)
        ]
        self.groups = Conv2d("grid_head.groups", t, n * cpp, 1, seed)
        prior = _prior_bias(config.heatmap_prior)
        self.inter_heads = GroupedHeads("grid_head.inter_heads", n, cpp, seed, bias_init=prior)
        self.fusion = [
            TransferBank(f"grid_head.fusion.o{order}", self.topology, cpp, seed)
            for order in range(1, config.fusion_order + 1)
        ]
        self.deconv1 = ConvTranspose2d("grid_head.deconv1", cpp, cpp, DECONV_KERNEL, seed, stride=2, padding=1)
        self.deconv2 = ConvTranspose2d("grid_head.deconv2", cpp, cpp, DECONV_KERNEL, seed, stride=2, padding=1)
        self.final_heads = GroupedHeads("grid_head.final_heads", n, cpp, seed, bias_init=prior)

    def point_features(self, roi_features: Tensor) -> list[Tensor]:
        """Trunk plus group projection: one (R, cpp, s, s) map F_i per grid point."""
        x = roi_features
        for conv in self.trunk:
            x = ops.relu(conv(x))
        x = ops.relu(self.groups(x))
        cpp = self.config.channels_per_point
        return [ops.take_channels(x, i * cpp, (i + 1) * cpp) for i in range(self.spec.n_points)]

    def fuse(self, features: list[Tensor]) -> list[Tensor]:
        if self.fusion:
            features = fuse_first_order(features, self.topology, self.fusion[0])
        if len(self.fusion) > 1:
            features = fuse_second_order(features, self.topology, self.fusion[1])
        return features

    def __call__(self, roi_features: Tensor) -> GridOutputs:
        cfg = self.config
        if roi_features.ndim != 4 or roi_features.shape[1:] != (cfg.backbone_channels, cfg.roi_size_grid, cfg.roi_size_grid):
            raise ShapeError(
                f"grid head expects (R, {cfg.backbone_channels}, {cfg.roi_size_grid}, {cfg.roi_size_grid}) "
                f"features, got {roi_features.shape}"
            )
        r = roi_features.shape[0]
        n, cpp, s = self.spec.n_points, cfg.channels_per_point, cfg.roi_size_grid
        features = self.point_features(roi_features)
        stacked = ops.reshape(ops.concat(features, axis=1), (r, n, cpp, s, s))
        intermediate = self.inter_heads(stacked)

        fused = ops.reshape(ops.concat(self.fuse(features), axis=1), (r * n, cpp, s, s))
        up = ops.relu(self.deconv1(fused))
        up = ops.relu(self.deconv2(up))
        size = up.shape[-1]
        final = self.final_heads(ops.reshape(up, (r, n, cpp, size, size)))
        return GridOutputs(intermediate, final)


# =============================================================================
# REGRESSION HEAD
# =============================================================================

class RegressionHead(Layer):
    """fc6 -> fc7 -> 4 normalized offsets over flattened RoI features."""

    def __init__(self, config: ModelConfig, seed: int):
        self.config = config
        in_features = config.backbone_channels * config.roi_size_reg ** 2
        self.fc6 = Linear("reg_head.fc6", in_features, config.reg_hidden, seed)
        self.fc7 = Linear("reg_head.fc7", config.reg_hidden, config.reg_hidden, seed)
        self.pred = Linear("reg_head.pred", config.reg_hidden, 4, seed, std=PRED_INIT_STD)

    def __call__(self, roi_features: Tensor) -> Tensor:
        r = roi_features.shape[0]
        x = ops.reshape(roi_features, (r, -1))
        x = ops.relu(self.fc6(x))
        x = ops.relu(self.fc7(x))
        return self.pred(x)


def encode_offsets(proposal, gt) -> np.ndarray:
    """(dx, dy, dw, dh) taking ``proposal`` onto ``gt``, center/log-size parameterization."""
    p, g = BoxBounds.of(proposal), BoxBounds.of(gt)
    pcx, pcy = p.center
    gcx, gcy = g.center
    return np.array([
        (gcx - pcx) / p.width,
        (gcy - pcy) / p.height,
        math.log(g.width / p.width),
        math.log(g.height / p.height),
    ], dtype=np.float64)


def decode_offsets(deltas: Sequence[float], proposal) -> BoxBounds:
    """Apply raw offsets to a proposal; log-size offsets are clamped to +-4."""
    p = BoxBounds.of(proposal)
    dx, dy, dw, dh = (float(v) for v in deltas)
    dw = min(max(dw, -MAX_LOG_SCALE), MAX_LOG_SCALE)
    dh = min(max(dh, -MAX_LOG_SCALE), MAX_LOG_SCALE)
    pcx, pcy = p.center
    cx = pcx + dx * p.width
    cy = pcy + dy * p.height
    w = p.width * math.exp(dw)
    h = p.height * math.exp(dh)
    return BoxBounds(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)


# =============================================================================
# FULL MODEL
# =============================================================================

@dataclass(frozen=True)
class HeadGeometry:
    """Where a proposal's features are read and how its heatmaps map back."""

    extract: BoxBounds
    roi: RoiGeometry
    extended: bool


def head_geometry(proposal, config: ModelConfig) -> HeadGeometry:
    """
    plain:     features and heatmap both span the proposal
    extended:  features span the proposal, heatmap spans twice its size
    enlarged:  the proposal itself is doubled first, then read plainly
    """
    roi = RoiGeometry.from_box(proposal, config.heatmap_size)
    if config.mapping == "enlarged":
        roi = enlarge_roi(roi)
        return HeadGeometry(roi.box, roi, False)
    return HeadGeometry(roi.box, roi, config.mapping == "extended")


class GridDetector(Layer):
    """Backbone plus one localization head (``grid`` or ``regression``)."""

    def __init__(self, config: ModelConfig, head: str = "grid", seed: int = 0):
        if head not in HEADS:
            raise ConfigError("head", f"must be one of {HEADS}, got {head!r}")
        config.validate()
        self.config = config
        self.head = head
        self.seed = seed
        self.backbone = Backbone(config.backbone_channels, seed)
        if head == "grid":
            self.grid_head = GridHead(config, seed)
        else:
            self.reg_head = RegressionHead(config, seed)

    @property
    def spec(self) -> GridSpec:
        return GridSpec.from_name(self.config.grid)

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def features(self, images) -> Tensor:
        images = images if isinstance(images, Tensor) else Tensor(images)
        if images.ndim == 3:
            images = ops.reshape(images, (1,) + images.shape)
        return self.backbone(images)

    def roi_features(self, features: Tensor, rois: np.ndarray, out_size: int) -> Tensor:
        return ops.roi_align(features, rois, out_size, FEATURE_STRIDE)

    def grid_forward(self, features: Tensor, rois: np.ndarray) -> GridOutputs:
        """``rois`` rows are (batch_index, x_l, y_u, x_r, y_b) of the extraction boxes."""
        return self.grid_head(self.roi_features(features, rois, self.config.roi_size_grid))

    def regression_forward(self, features: Tensor, rois: np.ndarray) -> Tensor:
        """Normalized offsets (R, 4); multiply by ``delta_stds`` for raw offsets."""
        return self.reg_head(self.roi_features(features, rois, self.config.roi_size_reg))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}

    def load_state_dict(self, tensors: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(tensors))
        unexpected = sorted(set(tensors) - set(params))
        if missing or unexpected:
            raise BlobFormatError(f"checkpoint mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, p in params.items():
            if tensors[name].shape != p.data.shape:
                raise BlobFormatError(f"checkpoint tensor {name} has shape {tensors[name].shape}, model expects {p.data.shape}")
            p.data = np.ascontiguousarray(tensors[name], dtype=p.data.dtype)
            p.grad = None


def regression_offsets(model: GridDetector, features: Tensor, proposals: Sequence) -> np.ndarray:
    """Raw (dx, dy, dw, dh) per proposal of image 0, shape (P, 4)."""
    if not proposals:
        return np.zeros((0, 4))
    rois = np.array([[0.0, *BoxBounds.of(p).as_tuple()] for p in proposals])
    return model.regression_forward(features, rois).data.astype(np.float64) * np.asarray(model.config.delta_stds)


def regression_forward_decode(model: GridDetector, features: Tensor, proposals: Sequence) -> list[BoxBounds]:
    """Predict offsets for each proposal (batch 0) and decode them into boxes."""
    deltas = regression_offsets(model, features, proposals)
    return [decode_offsets(d, p) for d, p in zip(deltas, proposals)]


def expected_parameter_count(config: ModelConfig, head: str = "grid") -> int:
    """
    Closed-form parameter count.

    backbone: 9h + h  +  9hC + C  +  2(9C^2 + C)          with h = C // 2
    grid:     trunk  k^2 C T + T + (L-1)(k^2 T^2 + T)
              groups T n c + n c,  heads 2(n c + n),  deconvs 2(16 c^2 + c)
              fusion  order x pairs x 3 x (25 c^2 + c)
    regression: (49 C) H + H  +  H^2 + H  +  4H + 4
    """
    c_b = config.backbone_channels
    half = max(c_b // 2, 1)
    total = 9 * half + half + 9 * half * c_b + c_b + 2 * (9 * c_b * c_b + c_b)
    if head == "regression":
        hidden = config.reg_hidden
        flat = c_b * config.roi_size_reg ** 2
        return total + flat * hidden + hidden + hidden * hidden + hidden + 4 * hidden + 4
    if head != "grid":
        raise InputError(f"unknown head {head!r}")
    spec = GridSpec.from_name(config.grid)
    n, c, t, k = spec.n_points, config.channels_per_point, config.trunk_channels, config.trunk_kernel
    pairs = len(FusionTopology.from_spec(spec).pairs)
    total += k * k * c_b * t + t + (config.trunk_convs - 1) * (k * k * t * t + t)
    total += t * n * c + n * c
    total += 2 * (n * c + n)
    total += 2 * (DECONV_KERNEL ** 2 * c * c + c)
    total += config.fusion_order * pairs * 3 * (25 * c * c + c)
    return total


# =============================================================================
# CHECKPOINTS
# =============================================================================

def save_checkpoint(model: GridDetector, stem: Path, extra: Optional[dict] = None) -> Path:
    meta = {"model": model.config.to_dict(), "head": model.head, "seed": model.seed, **(extra or {})}
    return save_blob(stem, model.state_dict(), meta)


def load_checkpoint(stem: Path) -> tuple[GridDetector, dict]:
    tensors, meta = load_blob(stem)
    if "model" not in meta or "head" not in meta:
        raise BlobFormatError(f"{stem}: manifest carries no model configuration")
    config = ModelConfig.from_dict(meta["model"])
    model = GridDetector(config, meta["head"], int(meta.get("seed", 0)))
    model.load_state_dict(tensors)
    logger.info("loaded %s checkpoint (%d parameters)", model.head, model.parameter_count())
    return model, meta
