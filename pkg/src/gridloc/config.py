"""
Run configuration and environment.

Usage:
    1. Optionally create a .env file with GRIDLOC_THREADS / GRIDLOC_LOG_LEVEL
    2. Build a RunConfig from a JSON file, then apply CLI overrides on top

This module must not import numpy: ``apply_thread_limit`` has to run before
the BLAS runtime is loaded.
"""

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

from dotenv import load_dotenv

from .errors import ConfigError

load_dotenv()

GRIDLOC_THREADS = os.getenv("GRIDLOC_THREADS")
GRIDLOC_LOG_LEVEL = os.getenv("GRIDLOC_LOG_LEVEL", "WARNING")

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)

GRID_NAMES = {
    "2pt": "2pt",
    "2-point": "2pt",
    "4pt": "2x2",
    "4-point": "2x2",
    "2x2": "2x2",
    "3x3": "3x3",
    "4x4": "4x4",
    "5x5": "5x5",
}

HEADS = ("grid", "regression")
MAPPINGS = ("plain", "extended", "enlarged")
DECODE_MODES = ("normalized", "literal")


def apply_thread_limit(threads: Optional[str] = GRIDLOC_THREADS) -> None:
    """Cap BLAS/OpenMP worker threads. Existing explicit settings win."""
    if not threads:
        return
    if not str(threads).isdigit() or int(threads) < 1:
        raise ConfigError("GRIDLOC_THREADS", f"expected a positive integer, got {threads!r}")
    for var in _THREAD_VARS:
        os.environ.setdefault(var, str(threads))


def configure_logging(verbose: bool = False) -> None:
    level = logging.INFO if verbose else getattr(logging, GRIDLOC_LOG_LEVEL.upper(), logging.WARNING)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def derive_seed(root: int, *tags: Any) -> int:
    """
    Derive a subsystem seed from the run seed.

    The seed is the first 8 bytes (little-endian) of BLAKE2b-64 over
    ``"{root}/{tag1}/{tag2}..."``. Every random stream in the package is
    keyed this way, so a single ``--seed`` reproduces a whole run.
    """
    text = "/".join(str(part) for part in (root, *tags))
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def parse_thresholds(spec: str) -> list[float]:
    """Parse ``start:stop:step`` (inclusive) or a comma list into IoU thresholds."""
    try:
        if ":" in spec:
            start, stop, step = (float(part) for part in spec.split(":"))
            if step <= 0 or stop < start:
                raise ValueError
            count = int(round((stop - start) / step)) + 1
            values = [round(start + i * step, 10) for i in range(count)]
        else:
            values = [float(part) for part in spec.split(",") if part.strip()]
    except ValueError:
        raise ConfigError("thresholds", f"cannot parse {spec!r}; use start:stop:step or a comma list") from None
    if not values or any(not 0.0 < v <= 1.0 for v in values):
        raise ConfigError("thresholds", f"IoU thresholds must lie in (0, 1], got {values}")
    return values


# =============================================================================
# SECTIONS
# =============================================================================

class _Section:
    """Shared dict round-trip and validation for config dataclasses."""

    section = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict):
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"{cls.section}.{key}", "unknown field")
        values = {}
        for f in fields(cls):
            if f.name in data:
                value = data[f.name]
                if isinstance(value, list):
                    value = tuple(value)
                values[f.name] = value
        config = cls(**values)
        config.validate()
        return config

    def override(self, **changes):
        changes = {k: v for k, v in changes.items() if v is not None}
        config = replace(self, **changes)
        config.validate()
        return config

    def validate(self) -> None:
        raise NotImplementedError

    def _positive(self, *names: str) -> None:
        for name in names:
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or value <= 0:
                raise ConfigError(f"{self.section}.{name}", f"must be positive, got {value!r}")

    def _non_negative(self, *names: str) -> None:
        for name in names:
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or value < 0:
                raise ConfigError(f"{self.section}.{name}", f"must be non-negative, got {value!r}")


@dataclass(frozen=True)
class ModelConfig(_Section):
    """Architecture of the backbone, grid head and regression head."""

    section = "model"

    backbone_channels: int = 32
    trunk_channels: int = 64
    roi_size_grid: int = 14
    roi_size_reg: int = 7
    trunk_convs: int = 8
    trunk_kernel: int = 3
    trunk_dilation: int = 2
    heatmap_size: int = 56
    grid: str = "3x3"
    channels_per_point: int = 8
    fusion_order: int = 2
    mapping: str = "extended"
    decode_mode: str = "normalized"
    reg_hidden: int = 256
    delta_stds: tuple[float, float, float, float] = (0.1, 0.1, 0.2, 0.2)
    heatmap_prior: float = 0.01

    def validate(self) -> None:
        self._positive(
            "backbone_channels", "trunk_channels", "roi_size_grid", "roi_size_reg",
            "trunk_convs", "trunk_kernel", "trunk_dilation", "heatmap_size",
            "channels_per_point", "reg_hidden",
        )
        if self.heatmap_size != self.roi_size_grid * 4:
            raise ConfigError(
                "model.heatmap_size",
                f"must equal roi_size_grid x 4 (two 2x deconvs), got {self.heatmap_size} for {self.roi_size_grid}",
            )
        if self.trunk_kernel % 2 == 0:
            raise ConfigError("model.trunk_kernel", "must be odd to preserve the RoI size")
        if self.grid not in GRID_NAMES:
            raise ConfigError("model.grid", f"unsupported grid {self.grid!r}; choose from {sorted(GRID_NAMES)}")
        if self.fusion_order not in (0, 1, 2):
            raise ConfigError("model.fusion_order", f"must be 0, 1 or 2, got {self.fusion_order!r}")
        if self.mapping not in MAPPINGS:
            raise ConfigError("model.mapping", f"must be one of {MAPPINGS}, got {self.mapping!r}")
        if self.decode_mode not in DECODE_MODES:
            raise ConfigError("model.decode_mode", f"must be one of {DECODE_MODES}, got {self.decode_mode!r}")
        if len(self.delta_stds) != 4 or any(s <= 0 for s in self.delta_stds):
            raise ConfigError("model.delta_stds", "expected four positive values")
        if not 0.0 < self.heatmap_prior < 1.0:
            raise ConfigError("model.heatmap_prior", "must lie in (0, 1)")

    @property
    def grid_name(self) -> str:
        return GRID_NAMES[self.grid]

    @property
    def trunk_padding(self) -> int:
        return self.trunk_dilation * (self.trunk_kernel - 1) // 2


@dataclass(frozen=True)
class TrainConfig(_Section):
    """SGD schedule and RoI sampling for one training run."""

    section = "train"

    lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 20
    decay_epochs: tuple[int, ...] = (13, 18)
    decay_factor: float = 0.1
    batch_size: int = 4
    positives_per_image: int = 24
    positive_iou: float = 0.5
    lambda_int: float = 1.0
    hflip: bool = True
    seed: int = 0

    def validate(self) -> None:
        self._positive("lr", "epochs", "batch_size", "positives_per_image", "decay_factor")
        self._non_negative("momentum", "weight_decay", "lambda_int", "seed")
        if any(not 0 < d < self.epochs for d in self.decay_epochs):
            raise ConfigError("train.decay_epochs", f"every decay epoch must lie in (0, {self.epochs}), got {self.decay_epochs}")
        if not 0.0 < self.positive_iou <= 1.0:
            raise ConfigError("train.positive_iou", "must lie in (0, 1]")


@dataclass(frozen=True)
class SceneParams(_Section):
    """Synthetic scene rendering parameters."""

    section = "scenes"

    image_size: int = 128
    min_objects: int = 1
    max_objects: int = 3
    background: float = 0.2
    noise_sigma: float = 0.1
    intensity_min: float = 0.6
    intensity_max: float = 1.0
    proposals_per_object: int = 16
    min_gap: int = 2
    max_placement_tries: int = 100

    def validate(self) -> None:
        self._positive("image_size", "min_objects", "max_objects", "proposals_per_object", "max_placement_tries")
        self._non_negative("background", "noise_sigma", "min_gap")
        if self.image_size % 4:
            raise ConfigError("scenes.image_size", "must be a multiple of 4 (backbone stride)")
        if self.image_size < 64:
            raise ConfigError("scenes.image_size", "must be at least 64 to host the largest shapes")
        if self.max_objects < self.min_objects:
            raise ConfigError("scenes.max_objects", "must be >= min_objects")
        if not 0.0 <= self.intensity_min <= self.intensity_max <= 1.0:
            raise ConfigError("scenes.intensity_min", "need 0 <= intensity_min <= intensity_max <= 1")


@dataclass(frozen=True)
class JitterParams(_Section):
    """Proposal jitter distribution around ground-truth boxes."""

    section = "jitter"

    shift_frac: float = 0.15
    log_scale_sigma: float = 0.2
    min_iou: float = 0.3
    max_tries: int = 50

    def validate(self) -> None:
        self._non_negative("shift_frac", "log_scale_sigma", "min_iou")
        self._positive("max_tries")
        if self.min_iou >= 1.0:
            raise ConfigError("jitter.min_iou", "must be below 1")


@dataclass(frozen=True)
class DataConfig(_Section):
    """Split sizes of a generated dataset."""

    section = "data"

    train_count: int = 2000
    val_count: int = 500

    def validate(self) -> None:
        for name in ("train_count", "val_count"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 0:
                raise ConfigError(f"data.{name}", f"must be a non-negative integer, got {value!r}")


@dataclass(frozen=True)
class EvalConfig(_Section):
    """Inference and AP evaluation settings."""

    section = "eval"

    iou_thresholds: tuple[float, ...] = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
    top_k: int = 125
    nms_iou: float = 0.5
    small_area: float = 24.0 ** 2
    large_area: float = 48.0 ** 2

    def validate(self) -> None:
        self._positive("top_k", "small_area", "large_area")
        if not self.iou_thresholds or any(not 0.0 < t <= 1.0 for t in self.iou_thresholds):
            raise ConfigError("eval.iou_thresholds", "thresholds must lie in (0, 1]")
        if list(self.iou_thresholds) != sorted(self.iou_thresholds):
            raise ConfigError("eval.iou_thresholds", "thresholds must be ascending")
        if not 0.0 < self.nms_iou <= 1.0:
            raise ConfigError("eval.nms_iou", "must lie in (0, 1]")
        if self.large_area < self.small_area:
            raise ConfigError("eval.large_area", "must be >= small_area")


# =============================================================================
# RUN CONFIG
# =============================================================================

@dataclass(frozen=True)
class RunConfig:
    """Everything a command needs; serialized next to every artifact it writes."""

    seed: int = 0
    out_dir: str = "runs"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    scenes: SceneParams = field(default_factory=SceneParams)
    jitter: JitterParams = field(default_factory=JitterParams)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    _SECTIONS = {
        "model": ModelConfig,
        "train": TrainConfig,
        "scenes": SceneParams,
        "jitter": JitterParams,
        "data": DataConfig,
        "eval": EvalConfig,
    }

    def validate(self) -> None:
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed", f"must be a non-negative integer, got {self.seed!r}")
        for name in self._SECTIONS:
            getattr(self, name).validate()

    def to_dict(self) -> dict:
        data: dict[str, Any] = {"seed": self.seed, "out_dir": self.out_dir}
        for name in self._SECTIONS:
            data[name] = getattr(self, name).to_dict()
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {"seed", "out_dir", *cls._SECTIONS}
        for key in data:
            if key not in known:
                raise ConfigError(key, "unknown top-level config key")
        sections = {
            name: section_cls.from_dict(data.get(name, {}))
            for name, section_cls in cls._SECTIONS.items()
        }
        config = cls(seed=data.get("seed", 0), out_dir=data.get("out_dir", "runs"), **sections)
        config.validate()
        return config

    @classmethod
    def load(cls, path: Optional[Path]) -> "RunConfig":
        if path is None:
            return cls()
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(str(path), f"invalid JSON: {e}") from None
        return cls.from_dict(data)

    def with_seed(self, seed: Optional[int]) -> "RunConfig":
        """Set the run seed; the training seed follows it."""
        if seed is None:
            return self
        config = replace(self, seed=seed, train=replace(self.train, seed=seed))
        config.validate()
        return config

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        return path
