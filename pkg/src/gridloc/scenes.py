"""
Deterministic synthetic detection corpus.

Usage:
    manifest = write_dataset(Path("data"), seed=0, data=DataConfig(), params=SceneParams())
    manifest, splits = read_dataset(Path("data"))

Each scene holds 1-3 non-overlapping shapes of four categories on a noisy
grayscale canvas, their tight ground-truth boxes, and jittered proposals
around every object. Everything is derived from (seed, split, index), so a
manifest alone regenerates byte-identical files.

Split file layout (little-endian):
    header     "<4sHHI"  magic b"GRDS", format version, image size, sample count
    per sample "<QIII"   scene seed, index, object count, proposal count
               image     float32[image_size * image_size], row-major
               objects   OBJECT_DTYPE[object count]
               proposals PROPOSAL_DTYPE[proposal count]
"""

import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from .config import DataConfig, JitterParams, SceneParams, derive_seed
from .errors import BlobFormatError, ChecksumError, InputError, PlacementError
from .gridgeom import BoxBounds, iou
from .numkit.blob import sha256_file
from .numkit.optim import make_rng

logger = logging.getLogger(__name__)

MAGIC = b"GRDS"
FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
SPLITS = ("train", "val")
SUPERSAMPLE = 2
MIN_EXTENT = 10
MAX_EXTENT = 60

HEADER = struct.Struct("<4sHHI")
SAMPLE_HEADER = struct.Struct("<QIII")
OBJECT_DTYPE = np.dtype([("box", "<f4", (4,)), ("category", "<u1")])
PROPOSAL_DTYPE = np.dtype([("box", "<f4", (4,)), ("iou", "<f8"), ("object", "<i4")])


class ShapeCategory(str, Enum):
    BAR = "bar"
    SQUARE = "square"
    ELLIPSE = "ellipse"
    DISC = "disc"

    @property
    def code(self) -> int:
        return list(ShapeCategory).index(self)

    @classmethod
    def from_code(cls, code: int) -> "ShapeCategory":
        return list(cls)[int(code)]


CATEGORIES = tuple(c.value for c in ShapeCategory)
STRUCTURED = ("bar", "square")
ROUND = ("ellipse", "disc")


# =============================================================================
# TYPES
# =============================================================================

@dataclass(frozen=True)
class ShapeGeometry:
    """
    Integer-anchored geometry of one shape.

    Rectangles (bar, square): top-left (x, y) and extents (w, h) in pixels.
    Ellipses and discs: center (x, y) and semi-axes (w, h) in pixels.
    """

    category: ShapeCategory
    x: float
    y: float
    w: float
    h: float


@dataclass(frozen=True)
class SceneObject:
    box: BoxBounds
    category: ShapeCategory


@dataclass(frozen=True)
class Proposal:
    box: BoxBounds
    iou: float
    object_index: int


@dataclass
class SceneSample:
    seed: int
    index: int
    image: np.ndarray
    objects: list[SceneObject] = field(default_factory=list)
    proposals: list[Proposal] = field(default_factory=list)

    @property
    def image_size(self) -> int:
        return self.image.shape[-1]

    def gt_boxes(self) -> np.ndarray:
        return np.array([o.box.as_tuple() for o in self.objects], dtype=np.float64).reshape(-1, 4)

    def proposal_boxes(self) -> np.ndarray:
        return np.array([p.box.as_tuple() for p in self.proposals], dtype=np.float64).reshape(-1, 4)


# =============================================================================
# RENDERING
# =============================================================================

def _sample_offsets() -> np.ndarray:
    return (np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE


def shape_coverage(shape: ShapeGeometry, size: int) -> np.ndarray:
    """Fraction of each pixel covered by the shape, from SUPERSAMPLE^2 point samples."""
    offsets = _sample_offsets()
    coords = (np.arange(size)[:, None] + offsets[None, :]).reshape(-1)
    ys, xs = np.meshgrid(coords, coords, indexing="ij")
    if shape.category in (ShapeCategory.BAR, ShapeCategory.SQUARE):
        inside = (xs >= shape.x) & (xs < shape.x + shape.w) & (ys >= shape.y) & (ys < shape.y + shape.h)
    else:
        inside = ((xs - shape.x) / shape.w) ** 2 + ((ys - shape.y) / shape.h) ** 2 <= 1.0
    inside = inside.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE)
    return inside.mean(axis=(1, 3))


def mask_box(mask: np.ndarray) -> BoxBounds:
    """Tight box around the nonzero pixels, in pixel-edge coordinates."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if not len(rows):
        raise InputError("empty shape mask")
    return BoxBounds(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def tight_box(shape: ShapeGeometry, size: int) -> BoxBounds:
    return mask_box(shape_coverage(shape, size) > 0)


def _draw_geometry(category: ShapeCategory, rng: np.random.Generator) -> tuple[float, float]:
    """Extents (w, h) for rectangles or semi-axes for round shapes."""
    if category == ShapeCategory.BAR:
        long = int(rng.integers(18, MAX_EXTENT + 1))
        aspect = rng.uniform(3.0, 5.0)
        short = max(3, int(long / aspect))
        return (long, short) if rng.random() < 0.5 else (short, long)
    if category == ShapeCategory.SQUARE:
        side = int(rng.integers(MIN_EXTENT, MAX_EXTENT + 1))
        return side, side
    if category == ShapeCategory.ELLIPSE:
        a = float(rng.integers(MIN_EXTENT // 2 + 1, MAX_EXTENT // 2 + 1))
        b = max(3.0, a / rng.uniform(2.0, 3.0))
        return (a, b) if rng.random() < 0.5 else (b, a)
    r = float(rng.integers(MIN_EXTENT // 2, MAX_EXTENT // 2 + 1))
    return r, r


def _place(category: ShapeCategory, rng: np.random.Generator, size: int) -> ShapeGeometry:
    w, h = _draw_geometry(category, rng)
    if category in (ShapeCategory.BAR, ShapeCategory.SQUARE):
        x = int(rng.integers(1, size - int(w)))
        y = int(rng.integers(1, size - int(h)))
        return ShapeGeometry(category, x, y, w, h)
    x = int(rng.integers(math.ceil(w) + 1, size - math.ceil(w)))
    y = int(rng.integers(math.ceil(h) + 1, size - math.ceil(h)))
    return ShapeGeometry(category, x, y, w, h)


def _separated(a: BoxBounds, b: BoxBounds, gap: float) -> bool:
    return (a.x_r + gap <= b.x_l or b.x_r + gap <= a.x_l
            or a.y_b + gap <= b.y_u or b.y_b + gap <= a.y_u)


def render_scene_from_shapes(shapes: list[ShapeGeometry], seed: int, params: SceneParams = SceneParams(),
                             index: int = 0) -> SceneSample:
    """Paint given shapes over a noisy background. No proposals."""
    rng = make_rng(derive_seed(seed, "paint"))
    size = params.image_size
    image = params.background + params.noise_sigma * rng.standard_normal((size, size))
    objects = []
    for shape in shapes:
        coverage = shape_coverage(shape, size)
        intensity = rng.uniform(params.intensity_min, params.intensity_max)
        image = image * (1.0 - coverage) + intensity * coverage
        objects.append(SceneObject(mask_box(coverage > 0), shape.category))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)[None]
    return SceneSample(seed, index, image, objects, [])


def render_scene(seed: int, params: SceneParams = SceneParams(), jitter: JitterParams = JitterParams(),
                 index: int = 0) -> SceneSample:
    """
    Render one scene with proposals.

    Shapes are placed by rejection sampling (size and position redrawn on each
    try) until they are ``min_gap`` pixels apart; PlacementError after
    ``max_placement_tries`` tries for any object.
    """
    params.validate()
    rng = make_rng(derive_seed(seed, "layout"))
    size = params.image_size
    count = int(rng.integers(params.min_objects, params.max_objects + 1))
    shapes: list[ShapeGeometry] = []
    boxes: list[BoxBounds] = []
    for k in range(count):
        category = ShapeCategory.from_code(int(rng.integers(len(ShapeCategory))))
        for _ in range(params.max_placement_tries):
            shape = _place(category, rng, size)
            box = tight_box(shape, size)
            if all(_separated(box, other, params.min_gap) for other in boxes):
                break
        else:
            raise PlacementError(
                f"scene {seed}: could not place object {k} ({category.value}) after {params.max_placement_tries} tries"
            )
        shapes.append(shape)
        boxes.append(box)

    sample = render_scene_from_shapes(shapes, seed, params, index)
    proposals = []
    for k, obj in enumerate(sample.objects):
        found = jitter_proposals(obj.box, params.proposals_per_object, derive_seed(seed, "jitter", k), jitter)
        proposals.extend(replace(p, object_index=k) for p in found)
    sample.proposals = proposals
    return sample


def jitter_proposals(gt_box, count: int, seed: int, params: JitterParams = JitterParams()) -> list[Proposal]:
    """
    Proposals around a ground-truth box: center shifted by N(0, shift_frac * size)
    per axis, size scaled by exp(N(0, log_scale_sigma)) per axis. Draws below
    ``min_iou`` are redrawn up to ``max_tries`` times; the last draw is kept.
    Coordinates are rounded to float32 before the IoU is recorded.
    """
    if count < 1:
        raise InputError(f"jitter_proposals: count must be >= 1, got {count}")
    gt = BoxBounds.of(gt_box)
    rng = make_rng(seed)
    cx, cy = gt.center
    proposals = []
    for _ in range(count):
        for _ in range(params.max_tries):
            dx, dy = rng.standard_normal(2) * params.shift_frac * np.array([gt.width, gt.height])
            sw, sh = np.exp(rng.standard_normal(2) * params.log_scale_sigma)
            w, h = gt.width * sw, gt.height * sh
            coords = np.array([cx + dx - w / 2, cy + dy - h / 2, cx + dx + w / 2, cy + dy + h / 2], dtype=np.float32)
            box = BoxBounds.of(coords.astype(np.float64))
            overlap = iou(box, gt)
            if overlap >= params.min_iou:
                break
        proposals.append(Proposal(box, overlap, 0))
    return proposals


def flip_sample(sample: SceneSample) -> SceneSample:
    """Mirror image, boxes and proposals left to right. IoUs are unchanged."""
    size = sample.image_size

    def flip(b: BoxBounds) -> BoxBounds:
        return BoxBounds(size - b.x_r, b.y_u, size - b.x_l, b.y_b)

    return SceneSample(
        sample.seed,
        sample.index,
        np.ascontiguousarray(sample.image[..., ::-1]),
        [SceneObject(flip(o.box), o.category) for o in sample.objects],
        [Proposal(flip(p.box), p.iou, p.object_index) for p in sample.proposals],
    )


# =============================================================================
# PERSISTENCE
# =============================================================================

def scene_seed(root: int, split: str, index: int) -> int:
    return derive_seed(root, split, index)


def generate_split(root_seed: int, split: str, count: int, params: SceneParams = SceneParams(),
                   jitter: JitterParams = JitterParams()) -> list[SceneSample]:
    samples = [render_scene(scene_seed(root_seed, split, i), params, jitter, index=i) for i in range(count)]
    logger.info("generated %d %s scenes", count, split)
    return samples


def write_split(path: Path, samples: list[SceneSample], image_size: int) -> None:
    with open(path, "wb") as f:
        f.write(HEADER.pack(MAGIC, FORMAT_VERSION, image_size, len(samples)))
        for s in samples:
            f.write(SAMPLE_HEADER.pack(s.seed, s.index, len(s.objects), len(s.proposals)))
            f.write(np.ascontiguousarray(s.image, dtype="<f4").tobytes())
            objects = np.zeros(len(s.objects), dtype=OBJECT_DTYPE)
            for k, o in enumerate(s.objects):
                objects[k] = (o.box.as_tuple(), o.category.code)
            f.write(objects.tobytes())
            proposals = np.zeros(len(s.proposals), dtype=PROPOSAL_DTYPE)
            for k, p in enumerate(s.proposals):
                proposals[k] = (p.box.as_tuple(), p.iou, p.object_index)
            f.write(proposals.tobytes())


def read_split(path: Path) -> list[SceneSample]:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise BlobFormatError(f"{path}: too short for a split header")
    magic, version, size, count = HEADER.unpack_from(raw, 0)
    if magic != MAGIC or version != FORMAT_VERSION:
        raise BlobFormatError(f"{path}: not a gridloc split file (magic {magic!r}, version {version})")
    offset = HEADER.size
    pixels = size * size
    samples = []
    try:
        for _ in range(count):
            seed, index, n_obj, n_prop = SAMPLE_HEADER.unpack_from(raw, offset)
            offset += SAMPLE_HEADER.size
            image = np.frombuffer(raw, dtype="<f4", count=pixels, offset=offset).reshape(1, size, size)
            offset += pixels * 4
            objects = np.frombuffer(raw, dtype=OBJECT_DTYPE, count=n_obj, offset=offset)
            offset += n_obj * OBJECT_DTYPE.itemsize
            proposals = np.frombuffer(raw, dtype=PROPOSAL_DTYPE, count=n_prop, offset=offset)
            offset += n_prop * PROPOSAL_DTYPE.itemsize
            samples.append(SceneSample(
                int(seed), int(index), image.astype(np.float32),
                [SceneObject(BoxBounds.of(o["box"].astype(np.float64)), ShapeCategory.from_code(o["category"]))
                 for o in objects],
                [Proposal(BoxBounds.of(p["box"].astype(np.float64)), float(p["iou"]), int(p["object"]))
                 for p in proposals],
            ))
    except (struct.error, ValueError) as e:
        raise BlobFormatError(f"{path}: truncated or corrupt ({e})") from None
    return samples


def write_dataset(out: Path, seed: int, data: DataConfig = DataConfig(), params: SceneParams = SceneParams(),
                  jitter: JitterParams = JitterParams()) -> dict:
    """Generate both splits, write them and the manifest; returns the manifest."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    counts = {"train": data.train_count, "val": data.val_count}
    files = {}
    for split in SPLITS:
        samples = generate_split(seed, split, counts[split], params, jitter)
        path = out / f"{split}.bin"
        write_split(path, samples, params.image_size)
        files[path.name] = sha256_file(path)
    manifest = {
        "format": "gridloc-dataset",
        "version": FORMAT_VERSION,
        "seed": seed,
        "counts": counts,
        "scenes": params.to_dict(),
        "jitter": jitter.to_dict(),
        "files": files,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest


def manifest_checksum(manifest: dict) -> str:
    """Digest identifying a dataset: hash of its file checksums in name order."""
    joined = "".join(f"{name}:{digest}" for name, digest in sorted(manifest["files"].items()))
    return hashlib.sha256(joined.encode("utf-8")).hexdigest()


def read_manifest(path: Path) -> dict:
    manifest_path = Path(path) / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {manifest_path}")
    try:
        return json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise BlobFormatError(f"{manifest_path}: invalid JSON ({e})") from None


def verify_dataset(path: Path, manifest: Optional[dict] = None) -> dict:
    manifest = manifest or read_manifest(path)
    for name, expected in manifest["files"].items():
        file = Path(path) / name
        if not file.exists():
            raise FileNotFoundError(f"dataset file missing: {file}")
        actual = sha256_file(file)
        if actual != expected:
            raise ChecksumError(file, expected, actual)
    return manifest


def read_dataset(path: Path, splits: tuple[str, ...] = SPLITS) -> tuple[dict, dict[str, list[SceneSample]]]:
    """Verify every checksum, then load the requested splits."""
    manifest = verify_dataset(path)
    data = {split: read_split(Path(path) / f"{split}.bin") for split in splits}
    return manifest, data


def regenerate_dataset(manifest: dict, out: Path) -> dict:
    """Rebuild a dataset from its manifest alone."""
    return write_dataset(
        out,
        manifest["seed"],
        DataConfig(train_count=manifest["counts"]["train"], val_count=manifest["counts"]["val"]),
        SceneParams.from_dict(manifest["scenes"]),
        JitterParams.from_dict(manifest["jitter"]),
    )


def dataset_id(manifest: dict) -> str:
    return manifest_checksum(manifest)[:16]
