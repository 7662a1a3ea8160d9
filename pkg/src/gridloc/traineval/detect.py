"""
Detection assembly: inference over proposals and greedy NMS.

Proposals stand in for a classification branch: they are ranked by their
recorded IoU, the best ``top_k`` are localized, and each detection inherits
the category of the object its proposal was drawn around.
"""

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import InputError
from ..gridgeom import BoxBounds, boxes_from_grid_points, decode_heatmaps, iou, iou_matrix
from ..gridnet import GridDetector, decode_offsets, head_geometry, regression_offsets
from ..numkit import ops
from ..scenes import SceneSample

logger = logging.getLogger(__name__)

ROI_CHUNK = 32

__all__ = ["Detection", "detect_samples", "infer", "iou", "nms"]


@dataclass(frozen=True)
class Detection:
    box: BoxBounds
    score: float
    image_id: int
    category: str = ""

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise InputError(f"detection score must lie in [0, 1], got {self.score}")
        if self.box.x_l > self.box.x_r or self.box.y_u > self.box.y_b:
            raise InputError(f"detection box {self.box.as_tuple()} is not ordered")

    def to_dict(self) -> dict:
        return {"image_id": self.image_id, "category": self.category, "score": self.score, **self.box.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "Detection":
        box = BoxBounds(data["x_l"], data["y_u"], data["x_r"], data["y_b"])
        return cls(box, float(data["score"]), int(data["image_id"]), str(data.get("category", "")))


def nms(detections: Sequence[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Greedy by descending score, ties in input order; drops boxes with IoU > threshold to a kept box."""
    if not detections:
        return []
    order = sorted(range(len(detections)), key=lambda k: -detections[k].score)
    boxes = np.array([detections[k].box.as_tuple() for k in order])
    overlaps = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(order), dtype=bool)
    kept = []
    for a in range(len(order)):
        if suppressed[a]:
            continue
        kept.append(detections[order[a]])
        suppressed[a + 1:] |= overlaps[a, a + 1:] > iou_threshold
    return kept


def _select_proposals(sample: SceneSample, top_k: int) -> list[int]:
    order = sorted(range(len(sample.proposals)), key=lambda k: -sample.proposals[k].iou)
    return order[:top_k]


def _grid_detections(model: GridDetector, features, sample: SceneSample, chosen: list[int]) -> list[tuple[BoxBounds, float]]:
    cfg = model.config
    spec = model.spec
    geometries = [head_geometry(sample.proposals[k].box, cfg) for k in chosen]
    results = []
    for start in range(0, len(chosen), ROI_CHUNK):
        chunk = geometries[start:start + ROI_CHUNK]
        rois = np.array([[0.0, *g.extract.as_tuple()] for g in chunk])
        probs = ops.sigmoid(model.grid_forward(features, rois).final)
        for g, heatmaps in zip(chunk, probs):
            estimates = decode_heatmaps(heatmaps, g.roi, g.extended)
            box = boxes_from_grid_points(estimates, spec, cfg.decode_mode)
            results.append((box, float(np.mean([e.p for e in estimates]))))
    return results


def _regression_detections(model: GridDetector, features, sample: SceneSample, chosen: list[int]) -> list[tuple[BoxBounds, float]]:
    proposals = [sample.proposals[k].box for k in chosen]
    results = []
    for start in range(0, len(proposals), ROI_CHUNK):
        chunk = proposals[start:start + ROI_CHUNK]
        for p, deltas in zip(chunk, regression_offsets(model, features, chunk)):
            results.append((decode_offsets(deltas, p), 1.0 / (1.0 + float(np.linalg.norm(deltas)))))
    return results


def infer(model: GridDetector, sample: SceneSample, top_k: int = 125, nms_iou: float = 0.5) -> list[Detection]:
    """
    Localize the ``top_k`` best proposals of one scene and apply per-category NMS.

    Grid head score: mean grid-point confidence. Regression head score:
    1 / (1 + |offsets|), a fixed 1.0 discounted by how far the box moved.
    """
    chosen = _select_proposals(sample, top_k)
    if not chosen:
        return []
    features = model.features(sample.image)
    if model.head == "grid":
        located = _grid_detections(model, features, sample, chosen)
    else:
        located = _regression_detections(model, features, sample, chosen)

    detections = [
        Detection(box, min(max(score, 0.0), 1.0), sample.index,
                  sample.objects[sample.proposals[k].object_index].category.value)
        for k, (box, score) in zip(chosen, located)
    ]
    kept = []
    for category in sorted({d.category for d in detections}):
        kept.extend(nms([d for d in detections if d.category == category], nms_iou))
    kept.sort(key=lambda d: -d.score)
    logger.debug("image %d: %d proposals -> %d detections", sample.index, len(chosen), len(kept))
    return kept


def detect_samples(model: GridDetector, samples: Sequence[SceneSample], top_k: int = 125,
                   nms_iou: float = 0.5) -> list[Detection]:
    """Run ``infer`` over every scene, in image order."""
    detections = []
    for sample in sorted(samples, key=lambda s: s.index):
        detections.extend(infer(model, sample, top_k, nms_iou))
    logger.info("%d scenes -> %d detections", len(samples), len(detections))
    return detections
