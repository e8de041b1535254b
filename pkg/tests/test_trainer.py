import numpy as np
import pytest

from robustsplat import io
from robustsplat.core import SplatCloud, inverse_sigmoid, sigmoid
from robustsplat.datagen import generate, preset_spec, save_dataset
from robustsplat.rasterizer import GradientSet, render, render_backward
from robustsplat.trainer import (DensifyStats, TrainConfig, TrainDiverged,
                                 Trainer, UtilizationTracker,
                                 accumulate_utilization, densify, init_cloud,
                                 sh_reset, train, ubp_prune)

from conftest import random_cloud


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    gen = generate(preset_spec('clean', seed=5, width=24, height=24,
                               n_train=8, n_test=2))
    save_dataset(gen, root / 'clean')
    return io.load_dataset(root / 'clean')


@pytest.fixture(scope="module")
def distractor_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds2")
    gen = generate(preset_spec('high', seed=6, width=24, height=24,
                               n_train=10, n_test=2))
    save_dataset(gen, root / 'high')
    return io.load_dataset(root / 'high')


class TestUtilization:
    def test_additivity(self, warm_kernels):
        rng = np.random.default_rng(0)
        cloud = random_cloud(rng, 6)
        from conftest import random_camera
        cam = random_camera(rng, 12, 12)
        _, aux = render_backward(cloud, cam, np.zeros((12, 12, 3)), np.ones((12, 12)))
        tracker = UtilizationTracker(6)
        accumulate_utilization(tracker, aux)
        once = tracker.u.copy()
        accumulate_utilization(tracker, aux)
        assert np.allclose(tracker.u, 2 * once)
        assert tracker.count == 2

    def test_prune_noop_when_all_above(self):
        rng = np.random.default_rng(1)
        cloud = random_cloud(rng, 5)
        tracker = UtilizationTracker(5)
        tracker.u[:] = 1.0
        pruned, removed, keep = ubp_prune(cloud, tracker, kappa=1e-8)
        assert len(pruned) == 5 and removed.size == 0
        assert tracker.count == 0

    def test_prune_removes_low_utilization(self):
        rng = np.random.default_rng(2)
        cloud = random_cloud(rng, 5)
        tracker = UtilizationTracker(5)
        tracker.u[:] = [1.0, 1e-12, 1.0, 0.0, 1.0]
        pruned, removed, keep = ubp_prune(cloud, tracker, kappa=1e-8)
        assert len(pruned) == 3
        assert list(removed) == [1, 3]
        assert np.allclose(pruned.mu, cloud.mu[[0, 2, 4]])

    def test_prune_everything_aborts(self):
        rng = np.random.default_rng(3)
        cloud = random_cloud(rng, 4)
        tracker = UtilizationTracker(4)
        with pytest.raises(RuntimeError, match="degenerate"):
            ubp_prune(cloud, tracker, kappa=1e-8)


class TestDensify:
    def _cfg(self, **kw):
        return TrainConfig(**kw)

    def test_zero_gradients_no_growth(self):
        rng = np.random.default_rng(4)
        cloud = random_cloud(rng, 10)
        cloud.opacity_logit[:] = 2.0  # far above the prune floor
        stats = DensifyStats.zeros(10)
        out, keep, n_new = densify(cloud, stats, self._cfg(), extent=3.0,
                                   rng=np.random.default_rng(0))
        assert len(out) == 10 and n_new == 0

    def test_low_opacity_pruned(self):
        rng = np.random.default_rng(5)
        cloud = random_cloud(rng, 6)
        cloud.opacity_logit[:] = 2.0
        cloud.opacity_logit[2] = inverse_sigmoid(0.001)
        stats = DensifyStats.zeros(6)
        out, keep, n_new = densify(cloud, stats, self._cfg(), extent=3.0,
                                   rng=np.random.default_rng(0))
        assert len(out) == 5
        assert not keep[2]

    def test_high_grad_large_splat_splits(self):
        rng = np.random.default_rng(6)
        cloud = random_cloud(rng, 3)
        cloud.opacity_logit[:] = 2.0
        cloud.log_scale[1] = np.log(0.5)  # large vs 1% of extent 3.0
        stats = DensifyStats.zeros(3)
        stats.grad_accum[1] = 1.0
        stats.count[1] = 1.0
        out, keep, n_new = densify(cloud, stats, self._cfg(), extent=3.0,
                                   rng=np.random.default_rng(0))
        assert not keep[1]           # original removed
        assert n_new == 2            # replaced by two children
        assert len(out) == 4
        children_scale = np.exp(out.log_scale[-2:])
        assert np.allclose(children_scale, 0.5 / 1.6)

    def test_high_grad_small_splat_clones(self):
        rng = np.random.default_rng(7)
        cloud = random_cloud(rng, 3)
        cloud.opacity_logit[:] = 2.0
        cloud.log_scale[:] = np.log(0.01)  # small vs 1% of extent 3.0
        stats = DensifyStats.zeros(3)
        stats.grad_accum[0] = 1.0
        stats.count[0] = 1.0
        out, keep, n_new = densify(cloud, stats, self._cfg(), extent=3.0,
                                   rng=np.random.default_rng(0))
        assert keep[0]
        assert n_new == 1
        assert np.allclose(out.mu[-1], cloud.mu[0])

    def test_cap_enforced(self):
        rng = np.random.default_rng(8)
        cloud = random_cloud(rng, 4)
        cloud.opacity_logit[:] = 2.0
        stats = DensifyStats.zeros(4)
        stats.grad_accum[:] = 1.0
        stats.count[:] = 1.0
        out, keep, n_new = densify(cloud, stats, self._cfg(max_splats=5),
                                   extent=3.0, rng=np.random.default_rng(0))
        assert len(out) <= 5
        assert n_new == 0


class TestShReset:
    def test_reset_values(self):
        rng = np.random.default_rng(9)
        cloud = random_cloud(rng, 5, degree=2)
        dc = cloud.sh[:, :, 0].copy()
        sh_reset(cloud, 1e-3)
        assert np.array_equal(cloud.sh[:, :, 0], dc)
        assert np.all(cloud.sh[:, :, 1:] == 1e-3)

    def test_degree_zero_noop(self):
        rng = np.random.default_rng(10)
        cloud = random_cloud(rng, 4, degree=0)
        before = cloud.sh.copy()
        sh_reset(cloud, 1e-3)
        assert np.array_equal(cloud.sh, before)


class TestInit:
    def test_counts_and_colors(self, tiny_dataset):
        cfg = TrainConfig(iterations=10)
        cloud = init_cloud(tiny_dataset, cfg, np.random.default_rng(0))
        n_pts = len(tiny_dataset.points)
        assert len(cloud) == n_pts + int(round(0.1 * n_pts))
        assert np.all(np.linalg.norm(cloud.rot, axis=1) == 1.0)
        assert np.all(sigmoid(cloud.opacity_logit) == pytest.approx(0.1))
        assert cloud.all_finite()


class TestLoop:
    def test_vanilla_mask_always_all_ones(self, tiny_dataset, warm_kernels):
        cfg = TrainConfig(method='vanilla', iterations=30, seed=0)
        t = Trainer(tiny_dataset, cfg)
        report = t.run(log_every=10)
        assert all(r['mask_inlier_fraction'] == 1.0 for r in report.rows)

    def test_loss_decreases(self, tiny_dataset, warm_kernels):
        cfg = TrainConfig(method='vanilla', iterations=200, seed=0)
        t = Trainer(tiny_dataset, cfg)
        report = t.run(log_every=50)
        assert report.rows[-1]['loss'] < report.rows[0]['loss']
        assert t.cloud.all_finite()

    def test_reproducible_bitwise(self, tiny_dataset, warm_kernels):
        cfg = TrainConfig(method='filter', iterations=60, seed=7)
        a = Trainer(tiny_dataset, cfg)
        a.run()
        b = Trainer(tiny_dataset, cfg)
        b.run()
        assert np.array_equal(a.cloud.mu, b.cloud.mu)
        assert np.array_equal(a.cloud.sh, b.cloud.sh)
        assert np.array_equal(a.cloud.opacity_logit, b.cloud.opacity_logit)

    def test_divergence_aborts(self, tiny_dataset, warm_kernels):
        cfg = TrainConfig(method='vanilla', iterations=10, seed=0)
        t = Trainer(tiny_dataset, cfg)
        t.cloud.sh[:, :, 0] = np.nan
        with pytest.raises(TrainDiverged):
            t.run()

    def test_first_iteration_mask_all_ones(self, distractor_dataset, warm_kernels):
        # alpha(0) = 1 makes the first effective mask all-ones for any method
        cfg = TrainConfig(method='filter', iterations=1, seed=3)
        t = Trainer(distractor_dataset, cfg)
        report = t.run(log_every=1)
        assert report.rows[0]['alpha'] == 1.0
        assert report.rows[0]['mask_inlier_fraction'] == 1.0

    def test_mlp_and_agg_methods_run(self, distractor_dataset, warm_kernels):
        for method in ('agg', 'mlp'):
            cfg = TrainConfig(method=method, iterations=25, seed=0,
                              feature_source='oracle', clusters=30)
            t = Trainer(distractor_dataset, cfg)
            report = t.run(log_every=5)
            assert len(report.rows) >= 1
            masks = t.final_masks()
            assert masks[0].shape == (24, 24)

    def test_sh_reset_event_fires(self, tiny_dataset, warm_kernels):
        cfg = TrainConfig(method='vanilla', iterations=25, seed=0,
                          sh_reset_step=20, densify_start=1000,
                          ubp_start=1000)
        t = Trainer(tiny_dataset, cfg)
        t.run()
        assert any('sh_reset' in e for e in t.report.events)
        assert np.all(t.cloud.sh[:, :, 1:] != 0.0)

    def test_train_function_returns_metrics(self, tiny_dataset, warm_kernels):
        cfg = TrainConfig(method='vanilla', iterations=40, seed=0)
        cloud, appearance, classifier, report = train(tiny_dataset, cfg)
        assert classifier is None
        assert appearance is not None
        assert 'psnr' in report.final_metrics
        assert np.isfinite(report.final_metrics['psnr'])

    def test_report_csv_schema(self, tiny_dataset, warm_kernels, tmp_path):
        cfg = TrainConfig(method='vanilla', iterations=20, seed=0)
        t = Trainer(tiny_dataset, cfg)
        report = t.run(log_every=10)
        p = tmp_path / 'progress.csv'
        report.to_csv(p)
        lines = p.read_text().splitlines()
        assert lines[0] == 'iteration,loss,splat_count,mask_inlier_fraction,alpha'
        assert len(lines) >= 3


class TestAppearanceIntegration:
    def test_dc_offset_shifts_rendering(self, warm_kernels):
        # additive b shifts the composited color by ~ b * Y0 * sum(alpha T)
        from robustsplat.core import Camera
        sh = np.zeros((1, 3, 1))
        cloud = SplatCloud(mu=np.array([[0.0, 0.0, 2.0]]),
                           log_scale=np.full((1, 3), np.log(5.0)),
                           rot=np.array([[1.0, 0, 0, 0]]),
                           opacity_logit=np.array([12.0]),
                           sh=sh)
        cam = Camera(R=np.eye(3), t=np.zeros(3), fx=8, fy=8, cx=4.5, cy=4.5,
                     width=8, height=8)
        base, _ = render(cloud, cam)
        shifted, _ = render(cloud, cam, appearance=(np.ones(3), np.array([0.1, 0, 0])))
        delta = shifted[4, 4, 0] - base[4, 4, 0]
        assert delta == pytest.approx(0.99 * 0.1 * 0.28209479177387814, rel=1e-6)
        assert shifted[4, 4, 1] == base[4, 4, 1]

    def test_scale_doubles_view_dependence(self, warm_kernels):
        # with a zero DC term, a=(2,1,1) doubles the red deviation from the
        # 0.5 level: doubled - base == base - 0.5 * (1 - T) per pixel
        rng = np.random.default_rng(11)
        cloud = random_cloud(rng, 1, degree=1)
        cloud.sh[0, :, 0] = 0.0
        cloud.sh[0, :, 1:] *= 0.5  # keep colors away from the clamp
        from conftest import random_camera
        cam = random_camera(rng, 8, 8)
        base, aux = render(cloud, cam)
        doubled, _ = render(cloud, cam, appearance=(np.array([2.0, 1, 1]), np.zeros(3)))
        weight = 1.0 - aux.transmittance
        assert np.allclose(doubled[:, :, 0] - base[:, :, 0],
                           base[:, :, 0] - 0.5 * weight, atol=1e-12)
        assert np.allclose(doubled[:, :, 1:], base[:, :, 1:])
