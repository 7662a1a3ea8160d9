"""Synthetic scenes, proposal jitter and dataset persistence."""

import itertools
from collections import Counter

import numpy as np
import pytest

from gridloc.config import JitterParams, SceneParams
from gridloc.errors import BlobFormatError, ChecksumError, InputError, PlacementError
from gridloc.gridgeom import BoxBounds, iou
from gridloc.numkit import make_rng
from gridloc.scenes import (
    CATEGORIES,
    ShapeCategory,
    ShapeGeometry,
    _draw_geometry,
    dataset_id,
    flip_sample,
    generate_split,
    jitter_proposals,
    manifest_checksum,
    mask_box,
    read_dataset,
    read_split,
    regenerate_dataset,
    render_scene,
    render_scene_from_shapes,
    tight_box,
)


# =============================================================================
# RENDERING
# =============================================================================

class TestTightBoxes:
    def test_disc(self):
        assert tight_box(ShapeGeometry(ShapeCategory.DISC, 32, 32, 10, 10), 64).as_tuple() == (22, 22, 42, 42)

    def test_bar(self):
        assert tight_box(ShapeGeometry(ShapeCategory.BAR, 10, 50, 40, 8), 128).as_tuple() == (10, 50, 50, 58)

    def test_mask_box(self):
        mask = np.zeros((10, 10), dtype=bool)
        mask[2:5, 3] = True
        mask[4, 7] = True
        assert mask_box(mask).as_tuple() == (3, 2, 8, 5)
        with pytest.raises(InputError):
            mask_box(np.zeros((4, 4), dtype=bool))

    def test_rendered_boxes_touch_extrema(self):
        """Every pixel the shape touches lies in its box, and each box edge touches one."""
        shapes = [
            ShapeGeometry(ShapeCategory.ELLIPSE, 40, 30, 14.0, 6.0),
            ShapeGeometry(ShapeCategory.SQUARE, 70, 70, 20, 20),
        ]
        sample = render_scene_from_shapes(shapes, seed=1)
        for obj, shape in zip(sample.objects, shapes):
            assert obj.box == tight_box(shape, 128)
            assert obj.category == shape.category


class TestGeometryDraws:
    @pytest.mark.parametrize("category", list(ShapeCategory))
    def test_aspect_rules(self, category):
        rng = make_rng(3)
        for _ in range(300):
            w, h = _draw_geometry(category, rng)
            long, short = max(w, h), min(w, h)
            if category == ShapeCategory.BAR:
                assert long / short >= 3.0
            elif category == ShapeCategory.ELLIPSE:
                assert long / short >= 2.0
            else:
                assert w == h


class TestRenderScene:
    def test_deterministic(self):
        a, b = render_scene(11), render_scene(11)
        assert a.image.tobytes() == b.image.tobytes()
        assert a.objects == b.objects and a.proposals == b.proposals

    def test_image_format(self):
        sample = render_scene(12)
        assert sample.image.shape == (1, 128, 128) and sample.image.dtype == np.float32
        assert sample.image.min() >= 0.0 and sample.image.max() <= 1.0

    def test_objects_separated(self):
        params = SceneParams()
        for seed in range(30):
            sample = render_scene(seed, params)
            assert 1 <= len(sample.objects) <= 3
            for a, b in itertools.combinations(sample.objects, 2):
                assert iou(a.box, b.box) == 0.0
            for obj in sample.objects:
                assert 0 <= obj.box.x_l < obj.box.x_r <= 128 and 0 <= obj.box.y_u < obj.box.y_b <= 128

    def test_proposals_annotated(self):
        sample = render_scene(13)
        assert len(sample.proposals) == 16 * len(sample.objects)
        for p in sample.proposals:
            assert p.iou == iou(p.box, sample.objects[p.object_index].box)

    def test_category_balance(self):
        counts = Counter(o.category.value for seed in range(150) for o in render_scene(1000 + seed).objects)
        total = sum(counts.values())
        for category in CATEGORIES:
            assert abs(counts[category] / total - 0.25) <= 0.1

    def test_placement_failure(self):
        params = SceneParams(min_objects=2, max_objects=2, min_gap=1000, max_placement_tries=3)
        with pytest.raises(PlacementError, match="3 tries"):
            render_scene(0, params)

    def test_flip(self):
        sample = render_scene(14)
        flipped = flip_sample(sample)
        np.testing.assert_array_equal(flipped.image[0], sample.image[0, :, ::-1])
        box, back = sample.objects[0].box, flipped.objects[0].box
        assert back.as_tuple() == (128 - box.x_r, box.y_u, 128 - box.x_l, box.y_b)
        again = flip_sample(flipped)
        assert again.objects == sample.objects
        np.testing.assert_array_equal(again.image, sample.image)


# =============================================================================
# JITTER
# =============================================================================

class TestJitter:
    GT = BoxBounds(20.0, 30.0, 60.0, 50.0)

    def test_zero_noise(self):
        params = JitterParams(shift_frac=0.0, log_scale_sigma=0.0)
        for p in jitter_proposals(self.GT, 5, seed=1, params=params):
            assert p.iou == 1.0 and p.box == self.GT

    def test_half_shift_iou(self):
        """A unit square shifted by half its width overlaps by 1/3."""
        assert iou((0, 0, 2, 2), (1, 0, 3, 2)) == pytest.approx(1 / 3)

    def test_positive_fraction(self):
        proposals = jitter_proposals(self.GT, 10_000, seed=2)
        positives = np.mean([p.iou >= 0.5 for p in proposals])
        assert positives >= 0.6

    def test_min_iou_resampling(self):
        proposals = jitter_proposals(self.GT, 500, seed=3, params=JitterParams(min_iou=0.5))
        assert np.mean([p.iou >= 0.5 for p in proposals]) > 0.99

    def test_annotation_exact(self):
        for p in jitter_proposals(self.GT, 50, seed=4):
            assert p.iou == iou(p.box, self.GT)
            np.testing.assert_array_equal(np.float32(p.box.as_tuple()), p.box.as_tuple())

    def test_count_checked(self):
        with pytest.raises(InputError):
            jitter_proposals(self.GT, 0, seed=0)


# =============================================================================
# PERSISTENCE
# =============================================================================

class TestDataset:
    def test_round_trip(self, small_dataset, small_scene_params):
        path, manifest = small_dataset
        loaded_manifest, data = read_dataset(path)
        assert loaded_manifest == manifest
        assert [len(data["train"]), len(data["val"])] == [4, 2]
        fresh = generate_split(7, "val", 2, small_scene_params, JitterParams())
        for got, want in zip(data["val"], fresh):
            assert (got.seed, got.index) == (want.seed, want.index)
            np.testing.assert_array_equal(got.image, want.image)
            assert got.objects == want.objects
            assert got.proposals == want.proposals

    def test_truncated_file(self, small_dataset):
        path, _ = small_dataset
        split = path / "train.bin"
        split.write_bytes(split.read_bytes()[:-10])
        with pytest.raises(ChecksumError, match="train.bin"):
            read_dataset(path)

    def test_regenerate(self, small_dataset, tmp_path):
        path, manifest = small_dataset
        again = regenerate_dataset(manifest, tmp_path / "again")
        assert again["files"] == manifest["files"]
        assert dataset_id(again) == dataset_id(manifest)
        assert len(dataset_id(manifest)) == 16
        assert manifest_checksum(manifest).startswith(dataset_id(manifest))

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_dataset(tmp_path)

    def test_bad_magic(self, tmp_path):
        bad = tmp_path / "train.bin"
        bad.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(BlobFormatError):
            read_split(bad)
