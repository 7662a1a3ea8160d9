"""
Grid-point geometry.

Grid layouts and their edge sets, the heatmap <-> image mappings (plain and
extended), cross-shaped supervision maps, argmax heatmap decoding and the
probability-weighted reconstruction of a box from decoded grid points.

Conventions:
    - Heatmaps are indexed [row, col]; a heatmap position is (H_x, H_y) =
      (col, row) and pixel centers sit on integer coordinates.
    - Grid points are (row, col) with unit spacing; their unit position inside
      a box is (u, v) = (col / (N - 1), row / (N - 1)).
    - Image boxes are (x_l, y_u, x_r, y_b) in pixel-edge coordinates.
"""

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .config import GRID_NAMES
from .errors import GeometryError, InputError

DEFAULT_HEATMAP_SIZE = 56
WEIGHT_FLOOR = 1e-6
COVERAGE_TOLERANCE = 1e-9


# =============================================================================
# TYPES
# =============================================================================

@dataclass(frozen=True)
class GridSpec:
    """
    Grid layout.

    ``edges`` holds the four index sets in box-boundary order
    (left, upper, right, bottom); index j is on an edge exactly when its unit
    coordinate on that axis is 0 or 1.
    """

    name: str
    side: int
    points: tuple[tuple[int, int], ...]
    unit_positions: tuple[tuple[float, float], ...]
    edges: tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...], tuple[int, ...]]

    @classmethod
    def from_name(cls, name: str) -> "GridSpec":
        canonical = GRID_NAMES.get(name)
        if canonical is None:
            raise InputError(f"unsupported grid {name!r}; choose from {sorted(GRID_NAMES)}")
        if canonical == "2pt":
            points = ((0, 0), (1, 1))
            side = 2
        else:
            side = int(canonical.split("x")[0])
            points = tuple((r, c) for r in range(side) for c in range(side))
        units = tuple((c / (side - 1), r / (side - 1)) for r, c in points)
        edges = (
            tuple(j for j, (u, _) in enumerate(units) if u == 0.0),
            tuple(j for j, (_, v) in enumerate(units) if v == 0.0),
            tuple(j for j, (u, _) in enumerate(units) if u == 1.0),
            tuple(j for j, (_, v) in enumerate(units) if v == 1.0),
        )
        return cls(canonical, side, points, units, edges)

    @property
    def n_points(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class BoxBounds:
    x_l: float
    y_u: float
    x_r: float
    y_b: float

    @classmethod
    def of(cls, box) -> "BoxBounds":
        if isinstance(box, BoxBounds):
            return box
        x_l, y_u, x_r, y_b = (float(v) for v in box)
        return cls(x_l, y_u, x_r, y_b)

    @property
    def width(self) -> float:
        return self.x_r - self.x_l

    @property
    def height(self) -> float:
        return self.y_b - self.y_u

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)

    @property
    def center(self) -> tuple[float, float]:
        return (self.x_l + self.x_r) / 2.0, (self.y_u + self.y_b) / 2.0

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_l, self.y_u, self.x_r, self.y_b)

    def to_dict(self) -> dict:
        return {"x_l": self.x_l, "y_u": self.y_u, "x_r": self.x_r, "y_b": self.y_b}


@dataclass(frozen=True)
class RoiGeometry:
    """A proposal's image placement plus the heatmap resolution it is read at."""

    p_x: float
    p_y: float
    w_p: float
    h_p: float
    w_o: int = DEFAULT_HEATMAP_SIZE
    h_o: int = DEFAULT_HEATMAP_SIZE

    def __post_init__(self):
        for name in ("w_p", "h_p", "w_o", "h_o"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise GeometryError(f"RoiGeometry.{name} must be positive, got {value}")

    @classmethod
    def from_box(cls, box, heatmap_size: int = DEFAULT_HEATMAP_SIZE) -> "RoiGeometry":
        b = BoxBounds.of(box)
        return cls(b.x_l, b.y_u, b.width, b.height, heatmap_size, heatmap_size)

    @property
    def box(self) -> BoxBounds:
        return BoxBounds(self.p_x, self.p_y, self.p_x + self.w_p, self.p_y + self.h_p)

    def to_dict(self) -> dict:
        return {"p_x": self.p_x, "p_y": self.p_y, "w_p": self.w_p, "h_p": self.h_p, "w_o": self.w_o, "h_o": self.h_o}


@dataclass(frozen=True)
class GridPointEstimate:
    index: int
    x: float
    y: float
    p: float

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise InputError(f"grid point confidence must lie in [0, 1], got {self.p}")


@dataclass
class SupervisionMap:
    """Binary target maps, shape (n_points, h_o, w_o), plus one validity flag per point."""

    maps: np.ndarray
    valid: np.ndarray

    @property
    def any_valid(self) -> bool:
        return bool(self.valid.any())


# =============================================================================
# TARGETS AND MAPPINGS
# =============================================================================

def grid_point_targets(gt_box, spec: GridSpec) -> np.ndarray:
    """Image-space grid points of a box, shape (n_points, 2) as (x, y)."""
    b = BoxBounds.of(gt_box)
    if not b.width > 0 or not b.height > 0:
        raise GeometryError(f"degenerate box {b.as_tuple()}: width and height must be positive")
    units = np.asarray(spec.unit_positions, dtype=np.float64)
    xs = b.x_l + units[:, 0] * b.width
    ys = b.y_u + units[:, 1] * b.height
    return np.stack([xs, ys], axis=1)


def map_heatmap_to_image(h, roi: RoiGeometry):
    h_x, h_y = h
    return roi.p_x + np.divide(h_x, roi.w_o) * roi.w_p, roi.p_y + np.divide(h_y, roi.h_o) * roi.h_p


def map_image_to_heatmap(i, roi: RoiGeometry):
    i_x, i_y = i
    return (np.subtract(i_x, roi.p_x) * roi.w_o / roi.w_p, np.subtract(i_y, roi.p_y) * roi.h_o / roi.h_p)


def map_heatmap_to_image_extended(h, roi: RoiGeometry):
    """The heatmap covers a region twice the proposal size, centered on it."""
    h_x, h_y = h
    return (
        roi.p_x + (4.0 * np.asarray(h_x, dtype=np.float64) - roi.w_o) / (2.0 * roi.w_o) * roi.w_p,
        roi.p_y + (4.0 * np.asarray(h_y, dtype=np.float64) - roi.h_o) / (2.0 * roi.h_o) * roi.h_p,
    )


def map_image_to_heatmap_extended(i, roi: RoiGeometry):
    i_x, i_y = i
    return (
        (np.subtract(i_x, roi.p_x) * 2.0 * roi.w_o / roi.w_p + roi.w_o) / 4.0,
        (np.subtract(i_y, roi.p_y) * 2.0 * roi.h_o / roi.h_p + roi.h_o) / 4.0,
    )


def to_heatmap(points: np.ndarray, roi: RoiGeometry, extended: bool):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    mapping = map_image_to_heatmap_extended if extended else map_image_to_heatmap
    return mapping((points[:, 0], points[:, 1]), roi)


def to_image(h_x, h_y, roi: RoiGeometry, extended: bool):
    mapping = map_heatmap_to_image_extended if extended else map_heatmap_to_image
    return mapping((h_x, h_y), roi)


def round_half_down(values) -> np.ndarray:
    """Nearest integer, ties toward -inf."""
    return np.ceil(np.asarray(values, dtype=np.float64) - 0.5).astype(np.int64)


def enlarge_roi(roi: RoiGeometry, factor: float = 2.0) -> RoiGeometry:
    """Scale a proposal about its center."""
    if factor <= 0:
        raise GeometryError(f"enlarge factor must be positive, got {factor}")
    w, h = roi.w_p * factor, roi.h_p * factor
    cx, cy = roi.p_x + roi.w_p / 2.0, roi.p_y + roi.h_p / 2.0
    return RoiGeometry(cx - w / 2.0, cy - h / 2.0, w, h, roi.w_o, roi.h_o)


# =============================================================================
# SUPERVISION
# =============================================================================

def render_supervision(targets, roi: RoiGeometry, spec: GridSpec, extended: bool = True) -> SupervisionMap:
    """
    Cross-shaped targets: the rounded pixel of each grid point and its four
    neighbors are positive, clipped at the heatmap border. A point whose rounded
    pixel falls outside the heatmap is invalid and keeps an all-zero map.
    """
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 2)
    if len(targets) != spec.n_points:
        raise InputError(f"expected {spec.n_points} targets for grid {spec.name}, got {len(targets)}")
    h_x, h_y = to_heatmap(targets, roi, extended)
    cols = round_half_down(h_x)
    rows = round_half_down(h_y)
    maps = np.zeros((spec.n_points, roi.h_o, roi.w_o), dtype=np.uint8)
    valid = (cols >= 0) & (cols < roi.w_o) & (rows >= 0) & (rows < roi.h_o)
    for j in np.flatnonzero(valid):
        r, c = rows[j], cols[j]
        maps[j, r, c] = 1
        maps[j, max(r - 1, 0):r + 2, c] = 1
        maps[j, r, max(c - 1, 0):c + 2] = 1
    return SupervisionMap(maps, valid)


def downsample_supervision(supervision: SupervisionMap, factor: int = 4) -> SupervisionMap:
    """Max-pool the target maps by ``factor`` (used for 14x14 intermediate targets)."""
    n, h, w = supervision.maps.shape
    if h % factor or w % factor:
        raise InputError(f"supervision size {h}x{w} is not divisible by {factor}")
    pooled = supervision.maps.reshape(n, h // factor, factor, w // factor, factor).max(axis=(2, 4))
    return SupervisionMap(pooled, supervision.valid.copy())


# =============================================================================
# DECODING
# =============================================================================

def decode_heatmap(heatmap, roi: RoiGeometry, extended: bool = True, index: int = 0) -> GridPointEstimate:
    """Take the most confident pixel (lowest row-major index on ties) and map it to the image."""
    heatmap = np.asarray(heatmap)
    if heatmap.shape != (roi.h_o, roi.w_o):
        raise InputError(f"heatmap shape {heatmap.shape} does not match RoI heatmap size {(roi.h_o, roi.w_o)}")
    flat = int(np.argmax(heatmap))
    row, col = divmod(flat, roi.w_o)
    x, y = to_image(float(col), float(row), roi, extended)
    return GridPointEstimate(index, float(x), float(y), float(heatmap[row, col]))


def decode_heatmaps(heatmaps, roi: RoiGeometry, extended: bool = True) -> list[GridPointEstimate]:
    """Decode one heatmap per grid point, shape (n_points, h_o, w_o)."""
    return [decode_heatmap(h, roi, extended, j) for j, h in enumerate(np.asarray(heatmaps))]


def _edge_value(values: np.ndarray, probs: np.ndarray, mode: str, side: int) -> float:
    if mode == "literal":
        return float(np.sum(values * probs) / side)
    total = float(np.sum(probs))
    if total < WEIGHT_FLOOR:
        return float(np.mean(values))
    return float(np.sum(values * probs) / total)


def boxes_from_grid_points(estimates: Sequence[GridPointEstimate], spec: GridSpec,
                           mode: str = "normalized") -> BoxBounds:
    """
    Each boundary is the probability-weighted average of the coordinates of the
    points on that edge. ``literal`` divides by the grid side instead of the
    summed confidence. Crossed boundaries are swapped.
    """
    if mode not in ("normalized", "literal"):
        raise InputError(f"unknown decode mode {mode!r}")
    by_index = {e.index: e for e in estimates}
    bounds = []
    for axis, edge in zip((0, 1, 0, 1), spec.edges):
        if not edge:
            raise GeometryError(f"grid {spec.name} has an empty edge set")
        missing = [j for j in edge if j not in by_index]
        if missing:
            raise GeometryError(f"no estimate for grid points {missing}")
        values = np.array([by_index[j].x if axis == 0 else by_index[j].y for j in edge], dtype=np.float64)
        probs = np.array([by_index[j].p for j in edge], dtype=np.float64)
        bounds.append(_edge_value(values, probs, mode, spec.side))
    x_l, y_u, x_r, y_b = bounds
    return BoxBounds(min(x_l, x_r), min(y_u, y_b), max(x_l, x_r), max(y_u, y_b))


# =============================================================================
# COVERAGE AND OVERLAP
# =============================================================================

def covered_points(proposal: RoiGeometry, gt_box, spec: GridSpec, mapping: str = "extended") -> np.ndarray:
    """Boolean mask of the gt grid points representable on the proposal's heatmap (closed window)."""
    if mapping == "enlarged":
        proposal, extended = enlarge_roi(proposal), False
    elif mapping in ("plain", "extended"):
        extended = mapping == "extended"
    else:
        raise InputError(f"unknown mapping {mapping!r}")
    h_x, h_y = to_heatmap(grid_point_targets(gt_box, spec), proposal, extended)
    tol = COVERAGE_TOLERANCE
    return (h_x >= -tol) & (h_x <= proposal.w_o + tol) & (h_y >= -tol) & (h_y <= proposal.h_o + tol)


def coverage_fraction(proposals: Iterable[RoiGeometry], gt_boxes: Iterable, spec: GridSpec,
                      mapping: str = "extended") -> float:
    """Fraction of ground-truth grid points, over all proposal/gt pairs, that the heatmap window contains."""
    hits = 0
    total = 0
    for proposal, gt in zip(proposals, gt_boxes, strict=True):
        mask = covered_points(proposal, gt, spec, mapping)
        hits += int(mask.sum())
        total += mask.size
    return hits / total if total else 0.0


def iou(a, b) -> float:
    a, b = BoxBounds.of(a), BoxBounds.of(b)
    iw = min(a.x_r, b.x_r) - max(a.x_l, b.x_l)
    ih = min(a.y_b, b.y_b) - max(a.y_u, b.y_u)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (N, 4) and (M, 4) box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
