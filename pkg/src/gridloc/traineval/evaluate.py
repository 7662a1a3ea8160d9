"""
IoU-stratified average precision.

Matching and accumulation follow the COCO protocol: per image and category,
detections in descending score claim the unmatched ground truth with the
highest IoU at or above the threshold; precision is made monotone and read at
101 evenly spaced recall levels. Categories without ground truth have an
undefined (NaN) AP and are left out of the averages.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import polars as pl

from ..errors import InputError
from ..gridgeom import BoxBounds, iou_matrix
from ..scenes import SceneSample
from .detect import Detection

logger = logging.getLogger(__name__)

# Category key used when detections carry no category
AGNOSTIC_CATEGORY = "all"

RECALL_LEVELS = np.linspace(0.0, 1.0, 101)
AREA_ALL = (0.0, math.inf)
REPORT_THRESHOLDS = (0.5, 0.75, 0.8, 0.9)


@dataclass(frozen=True)
class GroundTruth:
    image_id: int
    box: BoxBounds
    category: str


def ground_truth_from_samples(samples: Iterable[SceneSample]) -> list[GroundTruth]:
    return [GroundTruth(s.index, o.box, o.category.value) for s in samples for o in s.objects]


def nanmean(values: Iterable[float]) -> float:
    arr = np.asarray(list(values), dtype=np.float64)
    arr = arr[~np.isnan(arr)]
    return float(arr.mean()) if arr.size else math.nan


def _key(t: float) -> str:
    return f"{t:.2f}"


@dataclass
class EvalResult:
    """AP per IoU threshold, per category, and for small and large objects."""

    thresholds: tuple[float, ...]
    ap_by_threshold: dict[float, float]
    per_category: dict[str, dict[float, float]]
    ap_small: float = math.nan
    ap_large: float = math.nan
    dataset_id: str = ""
    label: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def ap(self) -> float:
        return nanmean(self.ap_by_threshold.values())

    def ap_at(self, threshold: float) -> float:
        for t, value in self.ap_by_threshold.items():
            if abs(t - threshold) < 1e-9:
                return value
        raise KeyError(f"threshold {threshold} was not evaluated (have {list(self.ap_by_threshold)})")

    def category_ap(self, category: str, threshold: Optional[float] = None) -> float:
        values = self.per_category[category]
        if threshold is None:
            return nanmean(values.values())
        return next(v for t, v in values.items() if abs(t - threshold) < 1e-9)

    @property
    def categories(self) -> list[str]:
        return sorted(self.per_category)

    def to_frame(self) -> pl.DataFrame:
        return pl.DataFrame({
            "threshold": list(self.thresholds),
            "ap": [self.ap_by_threshold[t] for t in self.thresholds],
        })

    def category_frame(self) -> pl.DataFrame:
        rows = []
        for category in self.categories:
            row = {"category": category, "ap": self.category_ap(category)}
            for t in self.thresholds:
                row[f"ap@{_key(t)}"] = self.per_category[category][t]
            rows.append(row)
        return pl.DataFrame(rows)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "dataset_id": self.dataset_id,
            "thresholds": list(self.thresholds),
            "ap": self.ap,
            "ap_by_threshold": {_key(t): v for t, v in self.ap_by_threshold.items()},
            "ap_small": self.ap_small,
            "ap_large": self.ap_large,
            "per_category": {c: {_key(t): v for t, v in by_t.items()} for c, by_t in self.per_category.items()},
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EvalResult":
        thresholds = tuple(float(t) for t in data["thresholds"])
        lookup = {_key(t): t for t in thresholds}
        return cls(
            thresholds=thresholds,
            ap_by_threshold={lookup[k]: _num(v) for k, v in data["ap_by_threshold"].items()},
            per_category={c: {lookup[k]: _num(v) for k, v in by_t.items()} for c, by_t in data["per_category"].items()},
            ap_small=_num(data.get("ap_small")),
            ap_large=_num(data.get("ap_large")),
            dataset_id=data.get("dataset_id", ""),
            label=data.get("label", ""),
            meta=data.get("meta", {}),
        )

    def save(self, out_dir: Path, stem: str = "eval") -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / f"{stem}.json"
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        self.to_frame().write_csv(out_dir / f"{stem}.csv")
        self.category_frame().write_csv(out_dir / f"{stem}_categories.csv")
        return path

    @classmethod
    def load(cls, path: Path) -> "EvalResult":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"evaluation result not found: {path}")
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))

    def summary(self) -> str:
        parts = [f"AP {100 * self.ap:.1f}"]
        for t in REPORT_THRESHOLDS:
            if any(abs(t - s) < 1e-9 for s in self.thresholds):
                parts.append(f"AP@{t:g} {100 * self.ap_at(t):.1f}")
        return " | ".join(parts)


def _num(value) -> float:
    return math.nan if value is None else float(value)


# =============================================================================
# MATCHING
# =============================================================================

def match_image(det_boxes: np.ndarray, gt_boxes: np.ndarray, gt_ignore: np.ndarray, threshold: float):
    """
    Greedy matching for one image and category; detections must already be in
    descending score order. Returns (det_match, det_to_ignored) where
    det_match[k] is the matched gt index or -1.
    """
    n_det, n_gt = len(det_boxes), len(gt_boxes)
    det_match = np.full(n_det, -1, dtype=np.int64)
    det_ignored = np.zeros(n_det, dtype=bool)
    if n_det == 0 or n_gt == 0:
        return det_match, det_ignored
    order = np.argsort(gt_ignore, kind="mergesort")
    overlaps = iou_matrix(det_boxes, gt_boxes)
    gt_taken = np.zeros(n_gt, dtype=bool)
    floor = min(threshold, 1 - 1e-10)
    for d in range(n_det):
        best_iou, m = floor, -1
        for g in order:
            if gt_taken[g]:
                continue
            if m > -1 and not gt_ignore[m] and gt_ignore[g]:
                break
            if overlaps[d, g] < best_iou:
                continue
            best_iou, m = overlaps[d, g], g
        if m > -1:
            det_match[d] = m
            det_ignored[d] = gt_ignore[m]
            gt_taken[m] = True
    return det_match, det_ignored


def interpolated_ap(is_tp: np.ndarray, n_positive: int) -> float:
    """101-point interpolated AP of a score-ordered list of true/false positives."""
    if n_positive == 0:
        return math.nan
    if len(is_tp) == 0:
        return 0.0
    tp = np.cumsum(is_tp, dtype=np.float64)
    fp = np.cumsum(~is_tp, dtype=np.float64)
    recall = tp / n_positive
    precision = tp / (tp + fp)
    for i in range(len(precision) - 1, 0, -1):
        precision[i - 1] = max(precision[i - 1], precision[i])
    idx = np.searchsorted(recall, RECALL_LEVELS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean())


def _area(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def category_ap(detections: Sequence[Detection], ground_truth: Sequence[GroundTruth], threshold: float,
                area_range: tuple[float, float] = AREA_ALL) -> float:
    """AP of one category at one threshold; objects outside ``area_range`` are ignored."""
    lo, hi = area_range
    gts_by_image: dict[int, list[GroundTruth]] = {}
    dets_by_image: dict[int, list[Detection]] = {}
    for g in ground_truth:
        gts_by_image.setdefault(g.image_id, []).append(g)
    for d in detections:
        dets_by_image.setdefault(d.image_id, []).append(d)
    images = sorted(set(gts_by_image) | set(dets_by_image))
    scores, flags = [], []
    n_positive = 0
    for image in images:
        gts = gts_by_image.get(image, [])
        dets = dets_by_image.get(image, [])
        dets = [dets[k] for k in np.argsort([-d.score for d in dets], kind="mergesort")]
        gt_boxes = np.array([g.box.as_tuple() for g in gts], dtype=np.float64).reshape(-1, 4)
        det_boxes = np.array([d.box.as_tuple() for d in dets], dtype=np.float64).reshape(-1, 4)
        gt_ignore = (_area(gt_boxes) < lo) | (_area(gt_boxes) > hi)
        n_positive += int((~gt_ignore).sum())
        det_match, det_ignored = match_image(det_boxes, gt_boxes, gt_ignore, threshold)
        out_of_range = (_area(det_boxes) < lo) | (_area(det_boxes) > hi)
        det_ignored |= (det_match < 0) & out_of_range
        for d, match, ignored in zip(dets, det_match, det_ignored):
            if not ignored:
                scores.append(d.score)
                flags.append(match >= 0)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="mergesort")
    return interpolated_ap(np.asarray(flags, dtype=bool)[order], n_positive)


def evaluate_ap(detections: Sequence[Detection], ground_truth: Sequence[GroundTruth],
                iou_thresholds: Sequence[float] = tuple(round(0.5 + 0.05 * i, 2) for i in range(10)),
                small_area: float = 24.0 ** 2, large_area: float = 48.0 ** 2,
                dataset_id: str = "", label: str = "") -> EvalResult:
    """
    AP per threshold (mean over categories), per category, and size-stratified AP.

    Detections without a category are matched class-agnostically: all of them
    against all ground truth, reported under the single category ``"all"``.
    Mixing labelled and unlabelled detections is an error.
    """
    thresholds = tuple(float(t) for t in iou_thresholds)
    unlabelled = sum(1 for d in detections if not d.category)
    if 0 < unlabelled < len(detections):
        raise InputError(f"{unlabelled} of {len(detections)} detections have no category; label all or none")
    if unlabelled:
        categories = [AGNOSTIC_CATEGORY]
        dets_by_cat = {AGNOSTIC_CATEGORY: list(detections)}
        gts_by_cat = {AGNOSTIC_CATEGORY: list(ground_truth)}
    else:
        categories = sorted({g.category for g in ground_truth} | {d.category for d in detections})
        dets_by_cat = {c: [d for d in detections if d.category == c] for c in categories}
        gts_by_cat = {c: [g for g in ground_truth if g.category == c] for c in categories}

    per_category = {
        c: {t: category_ap(dets_by_cat[c], gts_by_cat[c], t) for t in thresholds}
        for c in categories
    }
    ap_by_threshold = {t: nanmean(per_category[c][t] for c in categories) for t in thresholds}

    def sized(area_range) -> float:
        return nanmean(
            nanmean(category_ap(dets_by_cat[c], gts_by_cat[c], t, area_range) for c in categories)
            for t in thresholds
        )

    result = EvalResult(
        thresholds=thresholds,
        ap_by_threshold=ap_by_threshold,
        per_category=per_category,
        ap_small=sized((0.0, small_area)),
        ap_large=sized((large_area, math.inf)),
        dataset_id=dataset_id,
        label=label,
    )
    logger.info("evaluated %d detections against %d objects: %s", len(detections), len(ground_truth), result.summary())
    return result
