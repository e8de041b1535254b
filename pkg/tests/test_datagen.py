import numpy as np
import pytest

from robustsplat.datagen import (DistractorSpec, SceneSpec, eval_masks, generate,
                                 metrics, preset_spec, save_dataset)
from robustsplat.features import agglomerative_cluster
from robustsplat import io


@pytest.fixture(scope="module")
def medium_ds():
    spec = preset_spec('medium', seed=11, width=48, height=48, n_train=12, n_test=4)
    return generate(spec)


class TestGenerate:
    def test_clean_has_empty_masks(self):
        gen = generate(preset_spec('clean', seed=1, width=32, height=32,
                                   n_train=4, n_test=2))
        for m in gen.gt_masks:
            assert np.all(m == 1.0)

    def test_coverage_within_tolerance(self, medium_ds):
        target = 0.15
        seen = 0
        for m in medium_ds.gt_masks:
            cov = float((m == 0).mean())
            if cov > 0:
                seen += 1
                assert abs(cov - target) <= 0.05
        assert seen > 0

    def test_distractor_frame_fraction(self):
        spec = preset_spec('high', seed=3, width=32, height=32, n_train=20, n_test=2)
        gen = generate(spec)
        with_distractor = sum((m == 0).any() for m in gen.gt_masks)
        assert with_distractor == 12  # 60% of 20

    def test_deterministic(self):
        spec = preset_spec('low', seed=7, width=32, height=32, n_train=6, n_test=2)
        a = generate(spec)
        b = generate(spec)
        for x, y in zip(a.train_images, b.train_images):
            assert np.array_equal(x, y)
        assert np.array_equal(a.points, b.points)

    def test_masks_exactly_mark_distractors(self, medium_ds):
        n_static = len(medium_ds.spec.spheres) + len(medium_ds.spec.boxes)
        for ids, mask in zip(medium_ds.object_ids, medium_ds.gt_masks):
            assert np.array_equal(mask == 0, ids > n_static)

    def test_static_pixels_consistent_across_shared_pose(self):
        # same camera pose twice: static scene renders identically
        spec = preset_spec('clean', seed=5, width=32, height=32, n_train=3,
                           n_test=3, pose_jitter=0.0)
        gen = generate(spec)
        gen2 = generate(spec)
        for a, b in zip(gen.test_images, gen2.test_images):
            assert np.array_equal(a, b)

    def test_test_frames_clean(self, medium_ds):
        # distractors never appear in test renders: regenerate clean twin
        clean = generate(preset_spec('clean', seed=11, width=48, height=48,
                                     n_train=12, n_test=4))
        for a, b in zip(medium_ds.test_images, clean.test_images):
            assert np.array_equal(a, b)

    def test_invalid_coverage_rejected(self):
        with pytest.raises(ValueError):
            DistractorSpec('sphere', np.zeros(3), coverage=0.75, frame_fraction=0.1)

    def test_points_on_static_surfaces(self, medium_ds):
        spec = medium_ds.spec
        pts = medium_ds.points
        ok = np.zeros(len(pts), dtype=bool)
        for s in spec.spheres:
            d = np.linalg.norm(pts - s.center, axis=1)
            ok |= np.abs(d - s.radius) < 1e-9
        for b in spec.boxes:
            inside = np.all((pts >= b.lo - 1e-9) & (pts <= b.hi + 1e-9), axis=1)
            on_face = np.zeros(len(pts), dtype=bool)
            for ax in range(3):
                on_face |= np.isclose(pts[:, ax], b.lo[ax]) | \
                    np.isclose(pts[:, ax], b.hi[ax])
            ok |= inside & on_face
        assert ok.all()


class TestOracleFeatures:
    def test_feature_channel_count(self, medium_ds):
        n_ids = 1 + len(medium_ds.spec.spheres) + len(medium_ds.spec.boxes) + \
            len(medium_ds.spec.distractors)
        assert medium_ds.feature_maps[0].data.shape[2] == n_ids + 16

    def test_clustering_purity_on_oracle_features(self, medium_ds):
        # every cluster must lie inside one GT object
        frame = next(i for i, m in enumerate(medium_ds.gt_masks) if (m == 0).any())
        feats = medium_ds.feature_maps[frame].data.astype(np.float64)
        ids = medium_ds.object_ids[frame]
        out = agglomerative_cluster(feats, 100)
        for lab in range(out.n_clusters):
            vals = np.unique(ids[out.labels == lab])
            assert vals.size == 1


class TestEvalMasks:
    def test_perfect(self):
        gt = [np.array([[1.0, 0.0], [1.0, 1.0]])]
        ious, mean = eval_masks([gt[0].copy()], gt)
        assert ious == [1.0] and mean == 1.0

    def test_all_inlier_vs_nonempty(self):
        gt = [np.array([[1.0, 0.0], [1.0, 1.0]])]
        ious, _ = eval_masks([np.ones((2, 2))], gt)
        assert ious == [0.0]

    def test_half_overlap(self):
        gt = [np.concatenate([np.zeros((2, 2)), np.ones((2, 2))], axis=1)]
        pred = [np.roll(gt[0], 1, axis=1)]
        ious, _ = eval_masks(pred, gt)
        assert ious[0] == pytest.approx(1.0 / 3.0)

    def test_both_empty(self):
        ious, mean = eval_masks([np.ones((2, 2))], [np.ones((2, 2))])
        assert ious == [1.0] and mean == 1.0


class TestMetrics:
    def test_identical_capped(self):
        img = np.random.default_rng(0).random((16, 16, 3))
        psnr, ssim = metrics(img, img)
        assert psnr == 99.0
        assert ssim == pytest.approx(1.0)

    def test_uniform_offset_psnr(self):
        a = np.zeros((16, 16, 3))
        b = np.full((16, 16, 3), 0.1)
        psnr, _ = metrics(a, b)
        assert psnr == pytest.approx(20.0)

    def test_ssim_symmetric(self):
        rng = np.random.default_rng(1)
        a = rng.random((20, 20, 3))
        b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
        assert metrics(a, b)[1] == pytest.approx(metrics(b, a)[1], abs=1e-12)

    def test_ssim_degrades_with_noise(self):
        rng = np.random.default_rng(2)
        a = rng.random((24, 24, 3))
        slight = np.clip(a + 0.02 * rng.standard_normal(a.shape), 0, 1)
        heavy = np.clip(a + 0.4 * rng.standard_normal(a.shape), 0, 1)
        assert metrics(a, slight)[1] > metrics(a, heavy)[1]


class TestSaveLoad:
    def test_roundtrip(self, tmp_path, medium_ds):
        out = tmp_path / "ds"
        save_dataset(medium_ds, out)
        ds = io.load_dataset(out)
        assert len(ds.train_images) == 12
        assert len(ds.test_images) == 4
        assert ds.gt_masks is not None and len(ds.gt_masks) == 12
        assert ds.feature_paths is not None
        assert ds.points.shape == medium_ds.points.shape
        # PNG quantization: images match to half a quantization step
        assert np.abs(ds.train_images[0] - medium_ds.train_images[0]).max() <= 0.5 / 255
        cam = ds.train_cams[3]
        ref = medium_ds.train_cams[3]
        assert np.allclose(cam.R, ref.R)
        assert np.allclose(cam.t, ref.t)

    def test_missing_parent_rejected(self, tmp_path, medium_ds):
        with pytest.raises(FileNotFoundError):
            save_dataset(medium_ds, tmp_path / "no" / "such" / "dir")
