"""Average precision: hand-computed cases, a brute-force oracle and result files."""

import math

import numpy as np
import pytest

from gridloc.errors import InputError
from gridloc.gridgeom import BoxBounds, iou_matrix
from gridloc.numkit import make_rng
from gridloc.traineval.detect import Detection
from gridloc.traineval.evaluate import (
    EvalResult,
    GroundTruth,
    category_ap,
    evaluate_ap,
    ground_truth_from_samples,
    interpolated_ap,
    nanmean,
)


def _gt(box, image_id=0, category="bar"):
    return GroundTruth(image_id, BoxBounds.of(box), category)


def _det(box, score, image_id=0, category="bar"):
    return Detection(BoxBounds.of(box), score, image_id, category)


def _brute_force_ap(dets, gts, threshold):
    """Single image and category: greedy matching, then max precision at recall >= r for 101 levels."""
    dets = sorted(dets, key=lambda d: -d.score)
    overlaps = iou_matrix([d.box.as_tuple() for d in dets], [g.box.as_tuple() for g in gts])
    taken = set()
    flags = []
    for n, d in enumerate(dets):
        best, match = threshold, None
        for k, g in enumerate(gts):
            if k not in taken and overlaps[n, k] >= best:
                best, match = overlaps[n, k], k
        if match is not None:
            taken.add(match)
        flags.append(match is not None)
    points = []
    tp = 0
    for n, flag in enumerate(flags, start=1):
        tp += flag
        points.append((tp / len(gts), tp / n))
    total = 0.0
    for r in np.linspace(0, 1, 101):
        candidates = [p for rec, p in points if rec >= r]
        total += max(candidates) if candidates else 0.0
    return total / 101


class TestInterpolatedAp:
    def test_hand_case(self):
        """TP, FP, TP over two objects: precision 1 up to recall .5, then 2/3."""
        ap = interpolated_ap(np.array([True, False, True]), 2)
        assert ap == pytest.approx((51 * 1.0 + 50 * 2 / 3) / 101)

    def test_no_positives(self):
        assert math.isnan(interpolated_ap(np.array([False]), 0))

    def test_no_detections(self):
        assert interpolated_ap(np.array([], dtype=bool), 3) == 0.0


class TestCategoryAp:
    def test_perfect(self):
        gts = [_gt((0, 0, 10, 10)), _gt((20, 20, 40, 30))]
        dets = [_det(g.box, 0.9) for g in gts]
        assert category_ap(dets, gts, 0.95) == 1.0

    def test_duplicate_is_false_positive(self):
        gts = [_gt((0, 0, 10, 10))]
        dets = [_det((0, 0, 10, 10), 0.9), _det((0, 0, 10, 10), 0.8)]
        assert category_ap(dets, gts, 0.5) == 1.0
        assert category_ap(list(reversed(dets)), gts, 0.5) == 1.0
        dets = [_det((0, 0, 10, 10), 0.5), _det((0, 0, 10, 10), 0.8), _det((50, 50, 60, 60), 0.9)]
        assert category_ap(dets, gts, 0.5) == pytest.approx(0.5)

    def test_matches_brute_force(self):
        rng = make_rng(7)
        for trial in range(40):
            n_gt = int(rng.integers(1, 5))
            gts = []
            for _ in range(n_gt):
                x, y = rng.uniform(0, 80, 2)
                w, h = rng.uniform(8, 30, 2)
                gts.append(_gt((x, y, x + w, y + h)))
            dets = []
            for g in gts:
                for _ in range(int(rng.integers(0, 3))):
                    jitter = rng.normal(0, 3, 4)
                    x_l, y_u, x_r, y_b = np.asarray(g.box.as_tuple()) + jitter
                    dets.append(_det((min(x_l, x_r), min(y_u, y_b), max(x_l, x_r), max(y_u, y_b)), float(rng.random())))
            for t in (0.5, 0.75, 0.9):
                assert category_ap(dets, gts, t) == pytest.approx(_brute_force_ap(dets, gts, t)), (trial, t)

    def test_area_range_ignores_out_of_range(self):
        """A small object outside the range neither counts as missed nor turns its match into a FP."""
        gts = [_gt((0, 0, 10, 10)), _gt((20, 20, 80, 80))]
        dets = [_det((0, 0, 10, 10), 0.9), _det((20, 20, 80, 80), 0.8)]
        assert category_ap(dets, gts, 0.5, (48.0 ** 2, math.inf)) == 1.0
        assert category_ap(dets[:1], gts, 0.5, (0.0, 24.0 ** 2)) == 1.0


def _synthetic_case(seed=3):
    """Twelve images, two objects each in different categories, two noisy detections per object."""
    rng = make_rng(seed)
    gts, dets = [], []
    categories = ("bar", "square", "ellipse", "disc")
    for image in range(12):
        for k in range(2):
            category = categories[(image + k) % 4]
            x, y = rng.uniform(0, 60, 2) + k * 60
            w, h = rng.uniform(10, 50, 2)
            gts.append(_gt((x, y, x + w, y + h), image, category))
            for _ in range(2):
                dx, dy, dw, dh = rng.normal(0, 0.08, 4) * np.array([w, h, w, h])
                dets.append(_det((x + dx, y + dy, x + w + dx + dw, y + h + dy + dh), float(rng.random()), image, category))
    return dets, gts


class TestEvaluateAp:
    def test_monotone_in_threshold(self):
        dets, gts = _synthetic_case()
        result = evaluate_ap(dets, gts)
        values = [result.ap_by_threshold[t] for t in result.thresholds]
        assert all(a >= b for a, b in zip(values, values[1:]))
        for category in result.categories:
            by_t = [result.per_category[category][t] for t in result.thresholds]
            assert all(a >= b for a, b in zip(by_t, by_t[1:]))

    def test_threshold_mean_over_categories(self):
        dets, gts = _synthetic_case(4)
        result = evaluate_ap(dets, gts, (0.5, 0.75))
        for t in (0.5, 0.75):
            assert result.ap_at(t) == pytest.approx(np.mean([result.per_category[c][t] for c in result.categories]))
        assert result.ap == pytest.approx(np.mean([result.ap_at(0.5), result.ap_at(0.75)]))

    def test_category_without_objects_is_nan(self):
        gts = [_gt((0, 0, 10, 10), category="disc")]
        dets = [_det((0, 0, 10, 10), 0.9, category="disc"), _det((30, 30, 40, 40), 0.9, category="bar")]
        result = evaluate_ap(dets, gts, (0.5,))
        assert math.isnan(result.per_category["bar"][0.5])
        assert result.ap_at(0.5) == 1.0

    def test_unlabelled_detections_match_any_category(self):
        gts = [_gt((0, 0, 10, 10)), _gt((20, 20, 50, 50), category="disc"), _gt((5, 5, 30, 30), 1, "square")]
        dets = [_det(g.box.as_tuple(), 0.9, g.image_id, category="") for g in gts]
        result = evaluate_ap(dets, gts, (0.5, 0.75))
        assert result.categories == ["all"]
        assert result.ap == 1.0

    def test_unlabelled_misses_still_count(self):
        gts = [_gt((0, 0, 10, 10)), _gt((20, 20, 50, 50), category="disc")]
        result = evaluate_ap([_det((0, 0, 10, 10), 0.9, category="")], gts, (0.5,))
        assert result.ap == pytest.approx(51 / 101)

    def test_mixed_labelling_rejected(self):
        dets = [_det((0, 0, 10, 10), 0.9), _det((20, 20, 30, 30), 0.8, category="")]
        with pytest.raises(InputError, match="no category"):
            evaluate_ap(dets, [_gt((0, 0, 10, 10))], (0.5,))

    def test_size_strata(self):
        gts = [_gt((0, 0, 10, 10)), _gt((20, 20, 80, 80), category="disc")]
        dets = [_det((0, 0, 10, 10), 0.9), _det((100, 100, 110, 110), 0.8, category="disc")]
        result = evaluate_ap(dets, gts, (0.5,))
        assert result.ap_small == 1.0
        assert result.ap_large == 0.0

    def test_no_detections(self):
        result = evaluate_ap([], [_gt((0, 0, 10, 10))], (0.5, 0.9))
        assert result.ap == 0.0

    def test_from_samples(self, small_dataset):
        from gridloc.scenes import read_dataset

        _, data = read_dataset(small_dataset[0])
        gts = ground_truth_from_samples(data["val"])
        assert len(gts) == sum(len(s.objects) for s in data["val"])
        assert {g.image_id for g in gts} == {s.index for s in data["val"]}


class TestEvalResult:
    def test_save_load(self, tmp_path):
        dets, gts = _synthetic_case(5)
        gts.append(_gt((0, 0, 5, 5), image_id=99, category="disc"))
        result = evaluate_ap(dets, gts, (0.5, 0.75, 0.8), dataset_id="abc", label="grid")
        result.per_category["square"][0.8] = math.nan
        path = result.save(tmp_path, "grid")
        assert (tmp_path / "grid.csv").exists() and (tmp_path / "grid_categories.csv").exists()
        loaded = EvalResult.load(path)
        assert loaded.thresholds == result.thresholds
        assert loaded.label == "grid" and loaded.dataset_id == "abc"
        assert loaded.ap_at(0.75) == result.ap_at(0.75)
        assert math.isnan(loaded.per_category["square"][0.8])

    def test_summary(self):
        result = evaluate_ap([_det((0, 0, 10, 10), 0.9)], [_gt((0, 0, 10, 10))], (0.5, 0.8, 0.85))
        assert result.summary() == "AP 100.0 | AP@0.5 100.0 | AP@0.8 100.0"

    def test_missing_threshold(self):
        result = evaluate_ap([], [_gt((0, 0, 10, 10))], (0.5,))
        with pytest.raises(KeyError):
            result.ap_at(0.9)

    def test_nanmean(self):
        assert nanmean([1.0, math.nan, 3.0]) == 2.0
        assert math.isnan(nanmean([math.nan]))
        assert math.isnan(nanmean([]))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            EvalResult.load(tmp_path / "absent.json")
