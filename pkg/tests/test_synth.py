"""Synthetic blob dataset: determinism, invariants, detectability."""
import numpy as np
import pytest

from sparsepose.evaluation import (
    BACKGROUNDS,
    TEMPLATES,
    centroid_estimator,
    fill_prompt_template,
)
from sparsepose.synth import (
    MIN_VALID_KEYPOINTS,
    SPECIES,
    TEMPLATE_POSE,
    make_synthetic_dataset,
    make_synthetic_sample,
)


@pytest.fixture(scope="module")
def dataset(spec17):
    return make_synthetic_dataset(12, spec17, seed=42)


class TestDeterminism:
    def test_same_seed_identical(self, spec17):
        a = make_synthetic_dataset(3, spec17, seed=9)
        b = make_synthetic_dataset(3, spec17, seed=9)
        for s, t in zip(a, b):
            assert np.array_equal(s.image, t.image)
            assert s.pose_set == t.pose_set
            assert s.caption == t.caption

    def test_different_seeds_differ(self, spec17):
        a = make_synthetic_dataset(2, spec17, seed=1)
        b = make_synthetic_dataset(2, spec17, seed=2)
        assert not np.array_equal(a[0].image, b[0].image)

    def test_sample_independent_of_count(self, spec17):
        short = make_synthetic_dataset(2, spec17, seed=5)
        long = make_synthetic_dataset(6, spec17, seed=5)
        for s, t in zip(short, long):
            assert np.array_equal(s.image, t.image)
            assert s.pose_set == t.pose_set

    def test_count_validation(self, spec17):
        with pytest.raises(ValueError, match="count"):
            make_synthetic_dataset(0, spec17, seed=0)


class TestImageInvariants:
    def test_shape_dtype_range(self, dataset):
        for s in dataset:
            assert s.image.shape == (64, 64, 3)
            assert s.image.dtype == np.float32
            assert s.image.min() >= 0.0 and s.image.max() <= 1.0

    def test_valid_keypoints_are_painted(self, dataset, spec17):
        palette = np.asarray(spec17.render_colors, dtype=np.float32) / 255.0
        for s in dataset:
            inst = s.pose_set.instances[0]
            for i, (x, y, v) in enumerate(inst.keypoints):
                if v > 0:
                    pixel = s.image[int(round(y)), int(round(x))]
                    assert np.allclose(pixel, palette[i], atol=1e-6), \
                        f"keypoint {i} center pixel is not its color"

    def test_disks_never_overlap(self, dataset):
        # Separation guarantee: centers of valid keypoints > 2 * radius apart.
        for s in dataset:
            inst = s.pose_set.instances[0]
            pts = [(x, y) for x, y, v in inst.keypoints if v > 0]
            for a in range(len(pts)):
                for b in range(a + 1, len(pts)):
                    d = np.hypot(pts[a][0] - pts[b][0],
                                 pts[a][1] - pts[b][1])
                    assert d > 4.0

    def test_disk_pixel_counts_match_solo_disks(self, dataset, spec17):
        from sparsepose.raster import paint_disk

        palette = np.asarray(spec17.render_colors, dtype=np.float32) / 255.0
        for s in dataset[:4]:
            inst = s.pose_set.instances[0]
            for i, (x, y, v) in enumerate(inst.keypoints):
                if v == 0:
                    continue
                solo = np.full((64, 64), -1, dtype=np.int32)
                paint_disk(solo, x, y, 2.0, i)
                color_mask = np.all(
                    np.abs(s.image - palette[i]) < 1e-6, axis=2)
                assert color_mask.sum() == (solo == i).sum()

    def test_centroid_within_one_pixel(self, dataset, spec17):
        for s in dataset:
            found = centroid_estimator(s.image, spec17)
            inst = s.pose_set.instances[0]
            for i, (x, y, v) in enumerate(inst.keypoints):
                px, py, score = found.keypoints[i]
                if v > 0:
                    assert score == 1.0
                    assert abs(px - x) <= 1.0 and abs(py - y) <= 1.0
                else:
                    assert score == 0.0

    def test_background_far_from_palette(self, dataset, spec17):
        palette = np.asarray(spec17.render_colors, dtype=np.float64) / 255.0
        s = dataset[0]
        inst = s.pose_set.instances[0]
        painted = np.zeros((64, 64), dtype=bool)
        for x, y, v in inst.keypoints:
            if v > 0:
                rr, cc = np.mgrid[0:64, 0:64]
                painted |= (rr - y) ** 2 + (cc - x) ** 2 <= 4.0
        bg = s.image[~painted].reshape(-1, 3).astype(np.float64)
        d = np.sqrt(((bg[:, None, :] - palette[None]) ** 2).sum(-1)).min()
        assert d > 0.3


class TestPoseInvariants:
    def test_at_least_min_valid(self, dataset):
        for s in dataset:
            n_valid = len(s.pose_set.instances[0].valid_indices())
            assert n_valid >= MIN_VALID_KEYPOINTS

    def test_keypoints_inside_margins(self, dataset):
        for s in dataset:
            for x, y, v in s.pose_set.instances[0].keypoints:
                assert 4.0 <= x <= 59.0
                assert 4.0 <= y <= 59.0

    def test_bbox_covers_valid_keypoints(self, dataset):
        for s in dataset:
            inst = s.pose_set.instances[0]
            x0, y0, w, h = inst.bbox
            assert inst.area == pytest.approx(w * h)
            for x, y, v in inst.keypoints:
                if v > 0:
                    assert x0 <= x <= x0 + w
                    assert y0 <= y <= y0 + h

    def test_image_ids_unique(self, dataset):
        ids = [s.pose_set.image_id for s in dataset]
        assert len(set(ids)) == len(ids)

    def test_visibility_varies(self, spec17):
        data = make_synthetic_dataset(30, spec17, seed=0)
        rates = [len(s.pose_set.instances[0].valid_indices()) / 17.0
                 for s in data]
        mean = sum(rates) / len(rates)
        assert 0.75 < mean < 0.95
        assert any(r < 1.0 for r in rates)


class TestCaptions:
    def test_caption_from_template_inventory(self, dataset):
        every = {
            fill_prompt_template(tid, sp, bg)
            for tid in TEMPLATES
            for sp in SPECIES
            for bg in BACKGROUNDS
        }
        for s in dataset:
            assert s.caption in every
            assert s.caption == s.pose_set.caption

    def test_category_is_species_word(self, dataset):
        for s in dataset:
            assert s.pose_set.category in SPECIES

    def test_template_2_example(self):
        assert fill_prompt_template(2, "dog", "grass or savanna") == \
            "A photo of dog in the grass or savanna."

    def test_caption_variety(self, spec17):
        data = make_synthetic_dataset(40, spec17, seed=3)
        assert len({s.caption for s in data}) > 10


class TestTemplatePose:
    def test_min_pairwise_separation(self):
        pts = np.asarray(TEMPLATE_POSE)
        n = len(pts)
        dmin = min(
            np.hypot(*(pts[a] - pts[b]))
            for a in range(n) for b in range(a + 1, n)
        )
        # 0.21 in unit coords keeps radius-2 disks disjoint at 64 px scale.
        assert dmin >= 0.21

    def test_unit_square(self):
        pts = np.asarray(TEMPLATE_POSE)
        assert pts.min() >= 0.0 and pts.max() <= 1.0

    def test_sample_matches_dataset_entry(self, spec17, dataset):
        again = make_synthetic_sample(spec17, 42, 3)
        assert np.array_equal(again.image, dataset[3].image)
        assert again.pose_set == dataset[3].pose_set
